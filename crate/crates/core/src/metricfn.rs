//! Fixed-weight feature extractors used as differentiable metric functions.
//!
//! An extractor is a stack of stages, each `conv3x3 → SiLU → 2×2 avg-pool`.
//! Pooling is always averaging so the distance is differentiable
//! everywhere. Weights are frozen: they are bound as graph constants and
//! never receive gradients.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::netcore::params::{fan_in_weight, load_params};
use crate::netcore::{Graph, ParamStore, ParamVars, Var};
use crate::rng;
use crate::tensor::{Real, Tensor};

/// Stage widths of the default multi-tap extractor.
pub const LPIPS_WIDTHS: [usize; 4] = [16, 32, 64, 64];
/// Stage widths of the single-tap baseline extractor.
pub const PLAIN_WIDTHS: [usize; 3] = [16, 32, 64];
/// Added to feature norms before channel normalization.
pub const UNIT_NORM_EPS: f64 = 1e-10;

/// Extractor registry key.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Backbone {
    /// Multi-tap, channel-normalized distance with seeded weights.
    LpipsAvgpool,
    /// Last tap only, plain squared error, seeded weights.
    PlainCnn,
    /// Multi-tap distance with weights loaded from a parameter container.
    File(PathBuf),
}

impl FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lpips_avgpool" => Ok(Self::LpipsAvgpool),
            "plain_cnn" => Ok(Self::PlainCnn),
            _ => match s.strip_prefix("file:") {
                Some(p) if !p.is_empty() => Ok(Self::File(PathBuf::from(p))),
                _ => Err(Error::invalid(format!("unknown metric backbone `{s}`"))),
            },
        }
    }
}

impl TryFrom<String> for Backbone {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Backbone> for String {
    fn from(b: Backbone) -> String {
        b.to_string()
    }
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::LpipsAvgpool => f.write_str("lpips_avgpool"),
            Self::PlainCnn => f.write_str("plain_cnn"),
            Self::File(p) => write!(f, "file:{}", p.display()),
        }
    }
}

/// Everything needed to construct an extractor.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtractorSpec {
    pub backbone: Backbone,
    pub in_channels: usize,
    pub seed: u64,
}

/// Maps `[-1, 1]` images to the extractor's input: bilinear resize to a
/// square `resolution`, then `x ↦ (x + 1) / 2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MetricTransform {
    pub resolution: usize,
}

impl Default for MetricTransform {
    fn default() -> Self {
        Self { resolution: 32 }
    }
}

impl MetricTransform {
    pub fn apply<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let r = g.resize_bilinear(x, self.resolution, self.resolution)?;
        let half = T::of(0.5);
        Ok(g.affine(r, half, half))
    }
}

/// A frozen feature extractor.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    id: String,
    widths: Vec<usize>,
    in_channels: usize,
    last_tap_only: bool,
    weights: ParamStore<f32>,
}

fn stage_key(i: usize, part: &str) -> String {
    format!("stage{i}.{part}")
}

/// Builds an extractor from its spec. Equal seeds give bit-identical
/// weights.
pub fn load_extractor(spec: &ExtractorSpec) -> Result<FeatureExtractor> {
    ensure!(spec.in_channels >= 1, "extractor needs at least one input channel");
    match &spec.backbone {
        Backbone::LpipsAvgpool => Ok(seeded(spec, &LPIPS_WIDTHS, false)),
        Backbone::PlainCnn => Ok(seeded(spec, &PLAIN_WIDTHS, true)),
        Backbone::File(path) => from_file(path, spec),
    }
}

fn seeded(spec: &ExtractorSpec, widths: &[usize], last_tap_only: bool) -> FeatureExtractor {
    let mut rng = rng::stream(spec.seed, "metric-extractor", 0);
    let mut weights = ParamStore::new();
    let mut cin = spec.in_channels;
    for (i, &w) in widths.iter().enumerate() {
        let kernel = fan_in_weight(&mut rng, &[3, 3, cin, w], 9 * cin);
        weights.insert(stage_key(i, "weight"), kernel).expect("unique keys");
        weights.insert(stage_key(i, "bias"), Tensor::zeros([w])).expect("unique keys");
        cin = w;
    }
    FeatureExtractor {
        id: format!("{}@{}", spec.backbone, spec.seed),
        widths: widths.to_vec(),
        in_channels: spec.in_channels,
        last_tap_only,
        weights,
    }
}

fn from_file(path: &Path, spec: &ExtractorSpec) -> Result<FeatureExtractor> {
    let weights = load_params(path)?;
    let mut widths = Vec::new();
    let mut cin = spec.in_channels;
    while let Some(w) = weights.get(&stage_key(widths.len(), "weight")) {
        let i = widths.len();
        let s = w.shape();
        if s.len() != 4 || s[0] != 3 || s[1] != 3 || s[2] != cin {
            return Err(Error::format(
                stage_key(i, "weight"),
                format!("expected [3, 3, {cin}, _], found {s:?}"),
            ));
        }
        let cout = s[3];
        match weights.get(&stage_key(i, "bias")) {
            Some(b) if b.shape() == [cout] => {}
            Some(b) => {
                return Err(Error::format(
                    stage_key(i, "bias"),
                    format!("expected [{cout}], found {:?}", b.shape()),
                ))
            }
            None => return Err(Error::format(stage_key(i, "bias"), "missing")),
        }
        widths.push(cout);
        cin = cout;
    }
    if widths.is_empty() {
        return Err(Error::format(stage_key(0, "weight"), "missing"));
    }
    if weights.len() != 2 * widths.len() {
        let stray = weights
            .paths()
            .find(|p| !p.starts_with("stage"))
            .cloned()
            .unwrap_or_else(|| stage_key(widths.len(), "weight"));
        return Err(Error::format(stray, "unexpected entry in extractor weights"));
    }
    Ok(FeatureExtractor {
        id: spec.backbone.to_string(),
        widths,
        in_channels: spec.in_channels,
        last_tap_only: false,
        weights,
    })
}

impl FeatureExtractor {
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn stages(&self) -> usize {
        self.widths.len()
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    /// Number of feature maps compared by [`Self::distance`].
    pub fn tap_count(&self) -> usize {
        if self.last_tap_only {
            1
        } else {
            self.stages()
        }
    }

    /// Whether features are channel-normalized before comparison.
    pub fn normalizes(&self) -> bool {
        !self.last_tap_only
    }

    pub fn weights(&self) -> &ParamStore<f32> {
        &self.weights
    }

    /// Width of the final tap, i.e. the dimension of pooled features.
    pub fn feature_dim(&self) -> usize {
        *self.widths.last().expect("at least one stage")
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        ensure!(
            shape.len() == 4 && shape[3] == self.in_channels,
            "extractor expects [N, H, W, {}], got {shape:?}",
            self.in_channels
        );
        let need = 1usize << self.stages();
        ensure!(
            shape[1] % need == 0 && shape[2] % need == 0,
            "{}x{} input cannot be halved {} times",
            shape[1],
            shape[2],
            self.stages()
        );
        Ok(())
    }

    fn bind<T: Real>(&self, g: &mut Graph<T>) -> ParamVars {
        g.bind_frozen(&self.weights.cast::<T>())
    }

    /// Feature maps after every stage, on the graph. `x` is expected in
    /// `[0, 1]`.
    pub fn taps<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Vec<Var>> {
        self.check_input(g.shape(x))?;
        let pv = self.bind(g);
        let mut h = x;
        let mut out = Vec::with_capacity(self.stages());
        for i in 0..self.stages() {
            let w = pv.get(&stage_key(i, "weight"))?;
            let b = pv.get(&stage_key(i, "bias"))?;
            let c = g.conv2d(h, w, b)?;
            let a = g.silu(c);
            h = g.avg_pool2(a)?;
            out.push(h);
        }
        Ok(out)
    }

    /// Feature maps after every stage, as values.
    pub fn extract<T: Real>(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let taps = self.taps(&mut g, xv)?;
        Ok(taps.into_iter().map(|v| g.value(v).clone()).collect())
    }

    /// Distance between two batches of features on the graph, averaged over
    /// the batch.
    pub fn distance<T: Real>(&self, g: &mut Graph<T>, a: &[Var], b: &[Var]) -> Result<Var> {
        ensure!(
            a.len() == self.stages() && b.len() == self.stages(),
            "feature tap count mismatch"
        );
        let skip = self.stages() - self.tap_count();
        let mut total: Option<Var> = None;
        for (&fa, &fb) in a.iter().zip(b).skip(skip) {
            let term = if self.normalizes() {
                let na = g.unit_normalize_last(fa, T::of(UNIT_NORM_EPS));
                let nb = g.unit_normalize_last(fb, T::of(UNIT_NORM_EPS));
                let d = g.sub(na, nb)?;
                let sq = g.square(d);
                let per_pixel = g.sum_last_axis(sq);
                g.mean(per_pixel)
            } else {
                g.mse(fa, fb)?
            };
            total = Some(match total {
                Some(acc) => g.add(acc, term)?,
                None => term,
            });
        }
        Ok(total.expect("at least one tap"))
    }

    /// Globally average-pooled final-tap features, `[N, feature_dim]`.
    pub fn pooled_features(&self, images: &Tensor<f32>, transform: MetricTransform) -> Result<Tensor<f64>> {
        let mut g = Graph::<f32>::new();
        let x = g.input(images.clone());
        let tx = transform.apply(&mut g, x)?;
        let taps = self.taps(&mut g, tx)?;
        let last = g.value(*taps.last().expect("at least one stage"));
        let (n, h, w, c) = (last.shape()[0], last.shape()[1], last.shape()[2], last.shape()[3]);
        let per = (h * w) as f64;
        let mut out = Tensor::<f64>::zeros([n, c]);
        for (b, row) in out.data_mut().chunks_exact_mut(c).enumerate() {
            let item = &last.data()[b * h * w * c..(b + 1) * h * w * c];
            for px in item.chunks_exact(c) {
                for (o, &v) in row.iter_mut().zip(px) {
                    *o += f64::from(v);
                }
            }
            row.iter_mut().for_each(|v| *v /= per);
        }
        Ok(out)
    }
}

/// Distance between two feature sets, as a value. Matches
/// [`FeatureExtractor::distance`] evaluated on the same taps.
pub fn feature_distance<T: Real>(
    extractor: &FeatureExtractor,
    a: &[Tensor<T>],
    b: &[Tensor<T>],
) -> Result<T> {
    ensure!(
        a.len() == extractor.stages() && b.len() == extractor.stages(),
        "feature tap count mismatch"
    );
    for (fa, fb) in a.iter().zip(b) {
        ensure!(fa.shape() == fb.shape(), "feature shapes differ: {:?} vs {:?}", fa.shape(), fb.shape());
    }
    let mut g = Graph::new();
    let va: Vec<Var> = a.iter().map(|t| g.input(t.clone())).collect();
    let vb: Vec<Var> = b.iter().map(|t| g.input(t.clone())).collect();
    let d = extractor.distance(&mut g, &va, &vb)?;
    Ok(g.value(d).item())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(backbone: Backbone) -> ExtractorSpec {
        ExtractorSpec {
            backbone,
            in_channels: 1,
            seed: 5,
        }
    }

    fn probe(seed: usize) -> Tensor<f64> {
        Tensor::from_fn([2, 32, 32, 1], |i| ((i + seed) * 37 % 101) as f64 / 101.0)
    }

    #[test]
    fn default_extractor_halves_four_times() {
        let e = load_extractor(&spec(Backbone::LpipsAvgpool)).unwrap();
        assert_eq!(e.stages(), 4);
        let f = e.extract(&probe(0)).unwrap();
        let sizes: Vec<usize> = f.iter().map(|t| t.shape()[1]).collect();
        assert_eq!(sizes, [16, 8, 4, 2]);
    }

    #[test]
    fn seeded_weights_are_reproducible() {
        let a = load_extractor(&spec(Backbone::LpipsAvgpool)).unwrap();
        let b = load_extractor(&spec(Backbone::LpipsAvgpool)).unwrap();
        assert_eq!(a.weights(), b.weights());
    }

    #[test]
    fn distance_matches_loop_oracle() {
        let e = load_extractor(&spec(Backbone::LpipsAvgpool)).unwrap();
        let fa = e.extract(&probe(0)).unwrap();
        let fb = e.extract(&probe(3)).unwrap();
        let got = feature_distance(&e, &fa, &fb).unwrap();
        let mut want = 0.0;
        for (ta, tb) in fa.iter().zip(&fb) {
            let c = ta.channels();
            let pixels = ta.numel() / c;
            let mut acc = 0.0;
            for p in 0..pixels {
                let va = &ta.data()[p * c..(p + 1) * c];
                let vb = &tb.data()[p * c..(p + 1) * c];
                let na = va.iter().map(|v| v * v).sum::<f64>().sqrt() + UNIT_NORM_EPS;
                let nb = vb.iter().map(|v| v * v).sum::<f64>().sqrt() + UNIT_NORM_EPS;
                for k in 0..c {
                    acc += (va[k] / na - vb[k] / nb).powi(2);
                }
            }
            want += acc / pixels as f64;
        }
        assert!((got - want).abs() < 1e-6 * want.max(1.0), "{got} vs {want}");
        let back = feature_distance(&e, &fb, &fa).unwrap();
        assert!((got - back).abs() < 1e-6);
        assert_eq!(feature_distance(&e, &fa, &fa).unwrap(), 0.0);
    }

    #[test]
    fn plain_backbone_uses_last_tap() {
        let e = load_extractor(&spec(Backbone::PlainCnn)).unwrap();
        assert_eq!((e.stages(), e.tap_count()), (3, 1));
        assert!(!e.normalizes());
    }

    #[test]
    fn rejects_too_small_input() {
        let e = load_extractor(&spec(Backbone::LpipsAvgpool)).unwrap();
        assert!(e.extract(&Tensor::<f32>::zeros([1, 8, 8, 1])).is_err());
    }

    #[test]
    fn backbone_parses() {
        assert_eq!("plain_cnn".parse::<Backbone>().unwrap(), Backbone::PlainCnn);
        assert_eq!(
            "file:w.cdm".parse::<Backbone>().unwrap(),
            Backbone::File(PathBuf::from("w.cdm"))
        );
        assert!("vgg".parse::<Backbone>().is_err());
        assert!("file:".parse::<Backbone>().is_err());
    }
}
