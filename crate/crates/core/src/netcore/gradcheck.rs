//! Central finite differences, used as an independent oracle for the
//! analytic gradients produced by [`Graph::backward`](super::Graph::backward).

use crate::netcore::params::ParamStore;
use crate::tensor::Real;

/// `(f(p + h) - f(p - h)) / 2h` for every scalar of every parameter.
pub fn finite_diff_grad<T: Real>(
    mut f: impl FnMut(&ParamStore<T>) -> T,
    params: &ParamStore<T>,
    h: T,
) -> ParamStore<T> {
    let mut out = params.zeros_like();
    let mut probe = params.clone();
    let paths: Vec<String> = params.paths().cloned().collect();
    for path in &paths {
        let n = params.get(path).unwrap().numel();
        for i in 0..n {
            let g = central(&mut f, &mut probe, path, i, h);
            out.get_mut(path).unwrap().data_mut()[i] = g;
        }
    }
    out
}

/// Finite differences for selected `(path, index)` scalars only. Useful when
/// the full parameter count makes exhaustive probing too slow.
pub fn finite_diff_probe<T: Real>(
    mut f: impl FnMut(&ParamStore<T>) -> T,
    params: &ParamStore<T>,
    h: T,
    probes: &[(String, usize)],
) -> Vec<T> {
    let mut probe = params.clone();
    probes
        .iter()
        .map(|(path, i)| central(&mut f, &mut probe, path, *i, h))
        .collect()
}

fn central<T: Real>(
    f: &mut impl FnMut(&ParamStore<T>) -> T,
    probe: &mut ParamStore<T>,
    path: &str,
    i: usize,
    h: T,
) -> T {
    let orig = probe.get(path).expect("probe path exists").data()[i];
    probe.get_mut(path).unwrap().data_mut()[i] = orig + h;
    let up = f(probe);
    probe.get_mut(path).unwrap().data_mut()[i] = orig - h;
    let down = f(probe);
    probe.get_mut(path).unwrap().data_mut()[i] = orig;
    (up - down) / (h + h)
}

/// Relative disagreement `|a - b| / max(|a|, |b|, floor)`.
///
/// The floor keeps comparisons meaningful for gradients that are zero up to
/// finite-difference noise.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn squared_norm_gives_twice_w() {
        let mut p = ParamStore::<f64>::new();
        p.insert("w", Tensor::new([3], vec![0.3, -1.2, 2.0]).unwrap()).unwrap();
        let g = finite_diff_grad(
            |s| s.get("w").unwrap().data().iter().map(|x| x * x).sum(),
            &p,
            1e-3,
        );
        for (gi, wi) in g.get("w").unwrap().data().iter().zip([0.3, -1.2, 2.0]) {
            assert!((gi - 2.0 * wi).abs() < 1e-9);
        }
    }
}
