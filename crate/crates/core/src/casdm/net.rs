//! Time-conditioned convolutional networks: a compact U-Net and a
//! fixed-resolution CNN. Both map `[N, H, W, Cin]` to `[N, H, W, Cout]`.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::netcore::params::{fan_in_weight, ParamStore};
use crate::netcore::{Graph, ParamVars, Var};
use crate::rng;
use crate::tensor::{Real, Tensor};

/// Width/depth hyper-parameters shared by both architectures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    /// Base channel width.
    pub channels: usize,
    /// Residual blocks per resolution level.
    pub blocks: usize,
    /// Number of resolution levels (the U-Net halves resolution between
    /// consecutive levels).
    pub levels: usize,
    /// Self-attention after each residual block, per level.
    #[serde(default)]
    pub attention: Vec<bool>,
    /// Width of the time-embedding MLP. Zero means `4 * channels`.
    #[serde(default)]
    pub time_embed: usize,
    /// Upper bound on group-norm groups.
    #[serde(default = "default_groups")]
    pub norm_groups: usize,
}

fn default_groups() -> usize {
    8
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            channels: 32,
            blocks: 2,
            levels: 2,
            attention: Vec::new(),
            time_embed: 0,
            norm_groups: default_groups(),
        }
    }
}

impl NetworkSpec {
    fn temb(&self) -> usize {
        if self.time_embed == 0 {
            4 * self.channels
        } else {
            self.time_embed
        }
    }

    fn level_channels(&self, level: usize) -> usize {
        if level == 0 {
            self.channels
        } else {
            2 * self.channels
        }
    }

    fn attn_at(&self, level: usize) -> bool {
        self.attention.get(level).copied().unwrap_or(false)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.channels >= 2 && self.channels % 2 == 0, "channels must be even and >= 2");
        ensure!(self.blocks >= 1, "need at least one block per level");
        ensure!(self.levels >= 1, "need at least one level");
        ensure!(self.norm_groups >= 1, "norm_groups must be >= 1");
        ensure!(
            self.attention.len() <= self.levels,
            "attention has {} entries for {} levels",
            self.attention.len(),
            self.levels
        );
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    FanIn(usize),
    Zeros,
    Ones,
}

struct ParamSpec {
    path: String,
    shape: Vec<usize>,
    init: Init,
}

#[derive(Default)]
struct Builder {
    specs: Vec<ParamSpec>,
}

impl Builder {
    fn add(&mut self, path: String, shape: Vec<usize>, init: Init) -> String {
        self.specs.push(ParamSpec {
            path: path.clone(),
            shape,
            init,
        });
        path
    }

    fn conv(&mut self, name: &str, k: usize, cin: usize, cout: usize, zero: bool) -> Conv {
        let w_init = if zero { Init::Zeros } else { Init::FanIn(k * k * cin) };
        Conv {
            w: self.add(format!("{name}.weight"), vec![k, k, cin, cout], w_init),
            b: self.add(format!("{name}.bias"), vec![cout], Init::Zeros),
        }
    }

    fn dense(&mut self, name: &str, i: usize, o: usize) -> Dense {
        Dense {
            w: self.add(format!("{name}.weight"), vec![i, o], Init::FanIn(i)),
            b: self.add(format!("{name}.bias"), vec![o], Init::Zeros),
        }
    }

    fn norm(&mut self, name: &str, c: usize, max_groups: usize) -> Norm {
        let groups = (1..=max_groups.min(c)).rev().find(|g| c % g == 0).unwrap_or(1);
        Norm {
            gamma: self.add(format!("{name}.gamma"), vec![c], Init::Ones),
            beta: self.add(format!("{name}.beta"), vec![c], Init::Zeros),
            groups,
        }
    }

    fn init(&self, seed: u64) -> ParamStore<f32> {
        let mut rng = rng::stream(seed, "param-init", 0);
        let mut store = ParamStore::new();
        for s in &self.specs {
            let t = match s.init {
                Init::FanIn(fan) => fan_in_weight(&mut rng, &s.shape, fan),
                Init::Zeros => Tensor::zeros(s.shape.clone()),
                Init::Ones => Tensor::full(s.shape.clone(), 1.0),
            };
            store.insert(s.path.clone(), t).expect("builder paths are unique");
        }
        store
    }
}

struct Conv {
    w: String,
    b: String,
}

impl Conv {
    fn forward<T: Real>(&self, g: &mut Graph<T>, p: &ParamVars, x: Var) -> Result<Var> {
        g.conv2d(x, p.get(&self.w)?, p.get(&self.b)?)
    }
}

struct Dense {
    w: String,
    b: String,
}

impl Dense {
    fn forward<T: Real>(&self, g: &mut Graph<T>, p: &ParamVars, x: Var) -> Result<Var> {
        g.linear(x, p.get(&self.w)?, p.get(&self.b)?)
    }
}

struct Norm {
    gamma: String,
    beta: String,
    groups: usize,
}

impl Norm {
    fn forward<T: Real>(&self, g: &mut Graph<T>, p: &ParamVars, x: Var) -> Result<Var> {
        g.group_norm(x, p.get(&self.gamma)?, p.get(&self.beta)?, self.groups)
    }
}

struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    emb: Dense,
    norm2: Norm,
    conv2: Conv,
    skip: Option<Conv>,
}

impl ResBlock {
    fn new(b: &mut Builder, name: &str, cin: usize, cout: usize, temb: usize, groups: usize) -> Self {
        Self {
            norm1: b.norm(&format!("{name}.norm1"), cin, groups),
            conv1: b.conv(&format!("{name}.conv1"), 3, cin, cout, false),
            emb: b.dense(&format!("{name}.emb"), temb, cout),
            norm2: b.norm(&format!("{name}.norm2"), cout, groups),
            conv2: b.conv(&format!("{name}.conv2"), 3, cout, cout, false),
            skip: (cin != cout).then(|| b.conv(&format!("{name}.skip"), 1, cin, cout, false)),
        }
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, p: &ParamVars, x: Var, emb: Var) -> Result<Var> {
        let h = self.norm1.forward(g, p, x)?;
        let h = g.silu(h);
        let h = self.conv1.forward(g, p, h)?;
        let e = self.emb.forward(g, p, emb)?;
        let h = g.add_item_channel(h, e)?;
        let h = self.norm2.forward(g, p, h)?;
        let h = g.silu(h);
        let h = self.conv2.forward(g, p, h)?;
        let skip = match &self.skip {
            Some(c) => c.forward(g, p, x)?,
            None => x,
        };
        g.add(skip, h)
    }
}

/// Single-head spatial self-attention with a residual connection.
struct AttnBlock {
    norm: Norm,
    qkv: Conv,
    proj: Conv,
}

impl AttnBlock {
    fn new(b: &mut Builder, name: &str, c: usize, groups: usize) -> Self {
        Self {
            norm: b.norm(&format!("{name}.norm"), c, groups),
            qkv: b.conv(&format!("{name}.qkv"), 1, c, 3 * c, false),
            proj: b.conv(&format!("{name}.proj"), 1, c, c, false),
        }
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, p: &ParamVars, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (n, hw, c) = (s[0], s[1] * s[2], s[3]);
        let h = self.norm.forward(g, p, x)?;
        let qkv = self.qkv.forward(g, p, h)?;
        let q = g.slice_last(qkv, 0, c)?;
        let k = g.slice_last(qkv, c, c)?;
        let v = g.slice_last(qkv, 2 * c, c)?;
        let q = g.reshape(q, &[n, hw, c])?;
        let k = g.reshape(k, &[n, hw, c])?;
        let v = g.reshape(v, &[n, hw, c])?;
        let scores = g.batch_matmul(q, k, true)?;
        let scores = g.scale(scores, T::of(1.0 / (c as f64).sqrt()));
        let attn = g.softmax_last(scores);
        let out = g.batch_matmul(attn, v, false)?;
        let out = g.reshape(out, &s)?;
        let out = self.proj.forward(g, p, out)?;
        g.add(x, out)
    }
}

/// Sinusoidal step features followed by a two-layer MLP.
struct TimeEmbed {
    dim: usize,
    l1: Dense,
    l2: Dense,
}

/// `[cos(t·f_0), …, cos(t·f_{d/2−1}), sin(t·f_0), …]` with geometric
/// frequencies `f_i = 10000^{−i/(d/2)}`.
pub fn sinusoidal_embedding<T: Real>(steps: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut out = Tensor::zeros([steps.len(), dim]);
    for (row, &t) in out.data_mut().chunks_exact_mut(dim).zip(steps) {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            let arg = t as f64 * freq;
            row[i] = T::of(arg.cos());
            row[half + i] = T::of(arg.sin());
        }
    }
    out
}

impl TimeEmbed {
    fn new(b: &mut Builder, dim: usize, temb: usize) -> Self {
        Self {
            dim,
            l1: b.dense("time.l1", dim, temb),
            l2: b.dense("time.l2", temb, temb),
        }
    }

    /// Returns `SiLU(MLP(sinusoid(t)))`, ready to be projected by each block.
    fn forward<T: Real>(&self, g: &mut Graph<T>, p: &ParamVars, steps: &[usize]) -> Result<Var> {
        let s = g.input(sinusoidal_embedding(steps, self.dim));
        let h = self.l1.forward(g, p, s)?;
        let h = g.silu(h);
        let h = self.l2.forward(g, p, h)?;
        Ok(g.silu(h))
    }
}

enum Stage {
    Res(ResBlock),
    Attn(AttnBlock),
    Down,
    Up,
}

impl Stage {
    fn forward<T: Real>(&self, g: &mut Graph<T>, p: &ParamVars, x: Var, emb: Var) -> Result<Var> {
        match self {
            Stage::Res(r) => r.forward(g, p, x, emb),
            Stage::Attn(a) => a.forward(g, p, x),
            Stage::Down => g.avg_pool2(x),
            Stage::Up => g.upsample2(x),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    UnetLite,
    FixresCnn,
}

/// A time-conditioned image-to-image network.
pub struct Network {
    arch: Architecture,
    in_channels: usize,
    out_channels: usize,
    min_divisor: usize,
    time: TimeEmbed,
    conv_in: Conv,
    /// Each group's output is kept as a skip connection (U-Net only).
    down: Vec<Vec<Stage>>,
    mid: Vec<Stage>,
    /// Each group starts by concatenating the most recent skip (U-Net only).
    up: Vec<Vec<Stage>>,
    norm_out: Norm,
    conv_out: Conv,
    builder: Builder,
}

impl Network {
    /// Builds the network layout. `zero_out` zero-initializes the final
    /// convolution so the untrained network outputs exactly zero.
    pub fn new(
        arch: Architecture,
        spec: &NetworkSpec,
        in_channels: usize,
        out_channels: usize,
        zero_out: bool,
    ) -> Result<Self> {
        spec.validate()?;
        ensure!(in_channels >= 1 && out_channels >= 1, "channel counts must be positive");
        let mut b = Builder::default();
        let temb = spec.temb();
        let groups = spec.norm_groups;
        let time = TimeEmbed::new(&mut b, spec.channels, temb);
        let conv_in = b.conv("conv_in", 3, in_channels, spec.channels, false);
        let mut down = Vec::new();
        let mut mid = Vec::new();
        let mut up = Vec::new();
        let mut ch = spec.channels;
        let min_divisor;
        match arch {
            Architecture::UnetLite => {
                min_divisor = 1 << (spec.levels - 1);
                let mut skips = vec![ch];
                for level in 0..spec.levels {
                    let out = spec.level_channels(level);
                    for i in 0..spec.blocks {
                        let name = format!("down.{level}.{i}");
                        let mut group = vec![Stage::Res(ResBlock::new(&mut b, &name, ch, out, temb, groups))];
                        ch = out;
                        if spec.attn_at(level) {
                            group.push(Stage::Attn(AttnBlock::new(&mut b, &format!("{name}.attn"), ch, groups)));
                        }
                        down.push(group);
                        skips.push(ch);
                    }
                    if level + 1 < spec.levels {
                        down.push(vec![Stage::Down]);
                        skips.push(ch);
                    }
                }
                let last = spec.levels - 1;
                mid.push(Stage::Res(ResBlock::new(&mut b, "mid.0", ch, ch, temb, groups)));
                if spec.attn_at(last) {
                    mid.push(Stage::Attn(AttnBlock::new(&mut b, "mid.attn", ch, groups)));
                }
                mid.push(Stage::Res(ResBlock::new(&mut b, "mid.1", ch, ch, temb, groups)));
                for level in (0..spec.levels).rev() {
                    let out = spec.level_channels(level);
                    for i in 0..=spec.blocks {
                        let skip = skips.pop().expect("one skip per up block");
                        let name = format!("up.{level}.{i}");
                        let mut group =
                            vec![Stage::Res(ResBlock::new(&mut b, &name, ch + skip, out, temb, groups))];
                        ch = out;
                        if spec.attn_at(level) {
                            group.push(Stage::Attn(AttnBlock::new(&mut b, &format!("{name}.attn"), ch, groups)));
                        }
                        if level > 0 && i == spec.blocks {
                            group.push(Stage::Up);
                        }
                        up.push(group);
                    }
                }
            }
            Architecture::FixresCnn => {
                min_divisor = 1;
                for i in 0..spec.levels * spec.blocks {
                    let name = format!("body.{i}");
                    mid.push(Stage::Res(ResBlock::new(&mut b, &name, ch, ch, temb, groups)));
                }
            }
        }
        let norm_out = b.norm("norm_out", ch, groups);
        let conv_out = b.conv("conv_out", 3, ch, out_channels, zero_out);
        Ok(Self {
            arch,
            in_channels,
            out_channels,
            min_divisor,
            time,
            conv_in,
            down,
            mid,
            up,
            norm_out,
            conv_out,
            builder: b,
        })
    }

    pub fn arch(&self) -> Architecture {
        self.arch
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// Fresh parameters. Identical seeds give bit-identical stores.
    pub fn init_params(&self, seed: u64) -> ParamStore<f32> {
        self.builder.init(seed)
    }

    /// Paths and shapes this network expects.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.builder
            .specs
            .iter()
            .map(|s| (s.path.clone(), s.shape.clone()))
            .collect()
    }

    /// Checks a store carries exactly the expected parameters.
    pub fn check_params<T: Real>(&self, store: &ParamStore<T>) -> Result<()> {
        ensure!(
            store.len() == self.builder.specs.len(),
            "expected {} parameters, found {}",
            self.builder.specs.len(),
            store.len()
        );
        for s in &self.builder.specs {
            let t = store
                .get(&s.path)
                .ok_or_else(|| crate::Error::invalid(format!("missing parameter `{}`", s.path)))?;
            ensure!(
                t.shape() == s.shape.as_slice(),
                "parameter `{}` has shape {:?}, expected {:?}",
                s.path,
                t.shape(),
                s.shape
            );
        }
        Ok(())
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &ParamVars, x: Var, steps: &[usize]) -> Result<Var> {
        let s = g.shape(x).to_vec();
        ensure!(s.len() == 4, "network input must be [N,H,W,C], got {s:?}");
        ensure!(
            s[3] == self.in_channels,
            "network expects {} input channels, got {}",
            self.in_channels,
            s[3]
        );
        ensure!(steps.len() == s[0], "one step per batch item required");
        ensure!(
            s[1] % self.min_divisor == 0 && s[2] % self.min_divisor == 0,
            "spatial size {}x{} not divisible by {}",
            s[1],
            s[2],
            self.min_divisor
        );
        let emb = self.time.forward(g, p, steps)?;
        let mut h = self.conv_in.forward(g, p, x)?;
        let mut skips = vec![h];
        for group in &self.down {
            for stage in group {
                h = stage.forward(g, p, h, emb)?;
            }
            skips.push(h);
        }
        for stage in &self.mid {
            h = stage.forward(g, p, h, emb)?;
        }
        for group in &self.up {
            let skip = skips.pop().expect("skip per up group");
            h = g.concat_last(h, skip)?;
            for stage in group {
                h = stage.forward(g, p, h, emb)?;
            }
        }
        let h = self.norm_out.forward(g, p, h)?;
        let h = g.silu(h);
        self.conv_out.forward(g, p, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> NetworkSpec {
        NetworkSpec {
            channels: 4,
            blocks: 1,
            levels: 2,
            attention: vec![false, true],
            time_embed: 8,
            norm_groups: 2,
        }
    }

    #[test]
    fn unet_output_shape_and_determinism() {
        let net = Network::new(Architecture::UnetLite, &tiny(), 1, 3, false).unwrap();
        let params = net.init_params(3);
        assert_eq!(params, net.init_params(3));
        net.check_params(&params).unwrap();
        let run = || {
            let mut g = Graph::<f32>::new();
            let pv = g.bind("", &params);
            let x = g.input(Tensor::from_fn([2, 4, 4, 1], |i| (i as f32 * 0.3).sin()));
            let y = net.forward(&mut g, &pv, x, &[3, 7]).unwrap();
            g.value(y).clone()
        };
        let a = run();
        assert_eq!(a.shape(), &[2, 4, 4, 3]);
        assert_eq!(a, run());
    }

    #[test]
    fn fixres_zero_out_gives_zero() {
        let net = Network::new(Architecture::FixresCnn, &tiny(), 2, 3, true).unwrap();
        let params = net.init_params(0);
        let mut g = Graph::<f32>::new();
        let pv = g.bind("", &params);
        let x = g.input(Tensor::from_fn([1, 6, 6, 2], |i| i as f32 / 10.0));
        let y = net.forward(&mut g, &pv, x, &[5]).unwrap();
        assert_eq!(g.value(y).max_abs(), 0.0);
    }

    #[test]
    fn wrong_input_channels_rejected() {
        let net = Network::new(Architecture::UnetLite, &tiny(), 1, 1, false).unwrap();
        let params = net.init_params(0);
        let mut g = Graph::<f32>::new();
        let pv = g.bind("", &params);
        let x = g.input(Tensor::zeros([1, 4, 4, 2]));
        assert!(net.forward(&mut g, &pv, x, &[1]).is_err());
        let odd = g.input(Tensor::zeros([1, 3, 3, 1]));
        assert!(net.forward(&mut g, &pv, odd, &[1]).is_err());
    }
}
