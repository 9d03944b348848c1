//! Property-based invariants of schedules, samplers, containers and the
//! Fréchet distance.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use casdm::data::{read_tensor, write_tensor, BatchSampler};
use casdm::eval::{frechet_distance, matrix_sqrt_psd, FrechetStats};
use casdm::netcore::params::{read_container, write_container};
use casdm::netcore::ParamStore;
use casdm::sampler::{check_eps_form, ddim_sigma, ddim_x0_coefs, EpsForm};
use casdm::schedule::{posterior_mean, q_sample, respace, x0_from_eps, ScheduleKind};
use casdm::{NoiseSchedule, Tensor};

fn kind() -> impl Strategy<Value = ScheduleKind> {
    prop_oneof![Just(ScheduleKind::Cosine), Just(ScheduleKind::Linear)]
}

fn tensor(n: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-1.0f64..1.0, n).prop_map(move |v| Tensor::new([1, n, 1, 1], v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn alpha_bar_strictly_decreases(k in kind(), steps in 2usize..3000) {
        let s = NoiseSchedule::new(k, steps).unwrap();
        let ab = s.alpha_bars();
        prop_assert!(ab[0] < 1.0 && ab[0] > 0.0);
        prop_assert!(ab.windows(2).all(|w| w[1] < w[0] && w[1] > 0.0));
        prop_assert!(s.betas().iter().all(|&b| b > 0.0 && b <= 0.999));
    }

    #[test]
    fn respacing_keeps_base_alpha_bars(steps in 2usize..2000, frac in 0.0f64..1.0) {
        let s = NoiseSchedule::new(ScheduleKind::Cosine, steps).unwrap();
        let n = 1 + (frac * (steps - 1) as f64) as usize;
        let r = respace(&s, n).unwrap();
        prop_assert_eq!(r.len(), n);
        prop_assert_eq!(*r.timesteps().last().unwrap(), steps);
        prop_assert!(r.timesteps().windows(2).all(|w| w[0] < w[1]));
        for (&t, &ab) in r.timesteps().iter().zip(r.alpha_bars()) {
            prop_assert_eq!(ab, s.alpha_bar(t));
        }
        let pairs = r.reverse_pairs();
        prop_assert_eq!(pairs.last().unwrap().1, 0);
    }

    #[test]
    fn forward_round_trip(k in kind(), t in 1usize..1000, x0 in tensor(6), e in tensor(6)) {
        let s = NoiseSchedule::new(k, 1000).unwrap();
        let x_t = q_sample(&x0, t, &e, &s).unwrap();
        let back = x0_from_eps(&x_t, &e, t, &s).unwrap();
        for (a, b) in back.data().iter().zip(x0.data()) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn posterior_mean_at_step_one_is_x0(x0 in tensor(4), x1 in tensor(4)) {
        let s = NoiseSchedule::new(ScheduleKind::Cosine, 500).unwrap();
        let mu = posterior_mean(&x0, &x1, 1, &s).unwrap();
        for (a, b) in mu.data().iter().zip(x0.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ddim_sigma_stays_admissible(t in 2usize..1000, back in 1usize..100, eta in 0.0f64..1.0) {
        let s = NoiseSchedule::new(ScheduleKind::Cosine, 1000).unwrap();
        let tp = t.saturating_sub(back);
        let sigma = ddim_sigma(&s, t, tp, eta);
        prop_assert!(sigma >= 0.0 && sigma * sigma <= 1.0 - s.alpha_bar(tp) + 1e-12);
        prop_assert!(ddim_x0_coefs(&s, t, tp, sigma).is_ok());
    }

    #[test]
    fn alpha_bar_ratio_form_is_consistent(steps in 10usize..400, div in 1usize..10, eta in 0.0f64..1.0) {
        let s = NoiseSchedule::new(ScheduleKind::Cosine, steps).unwrap();
        let r = respace(&s, (steps / div).max(1)).unwrap();
        prop_assert!(check_eps_form(&r, EpsForm::AlphaBarRatio, eta, 1e-6).unwrap().consistent());
    }

    #[test]
    fn tensor_container_round_trips(dims in prop::collection::vec(1usize..5, 0..4), seed in any::<u32>()) {
        let n: usize = dims.iter().product();
        let t = Tensor::<f32>::from_fn(dims.clone(), |i| ((i as u32).wrapping_mul(seed) % 1000) as f32 * 1e-3 - 0.5);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        prop_assert_eq!(buf.len(), 4 + 8 + 8 * dims.len() + 4 * n);
        prop_assert_eq!(read_tensor(buf.as_slice()).unwrap(), t);
    }

    #[test]
    fn truncated_tensor_is_rejected(cut in 1usize..20) {
        let t = Tensor::<f32>::zeros([2, 3]);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let keep = buf.len().saturating_sub(cut);
        prop_assert!(read_tensor(&buf[..keep]).is_err());
    }

    #[test]
    fn param_container_round_trips(sizes in prop::collection::vec(1usize..6, 1..5)) {
        let mut store = ParamStore::new();
        for (i, &n) in sizes.iter().enumerate() {
            store.insert(format!("layer{i}.w"), Tensor::from_fn([n, 2], |j| j as f32 - 1.5)).unwrap();
        }
        let mut buf = Vec::new();
        write_container(&mut buf, &store).unwrap();
        prop_assert_eq!(read_container(buf.as_slice()).unwrap(), store);
    }

    #[test]
    fn batches_cover_each_epoch_once(n in 1usize..200, batch in 1usize..64, seed in any::<u64>()) {
        let mut s = BatchSampler::new(n, batch, seed).unwrap();
        let steps = n.div_ceil(batch) as u64 * 2;
        let drawn: Vec<usize> = (0..steps).flat_map(|k| s.indices(k)).collect();
        let mut first: Vec<usize> = drawn[..n].to_vec();
        first.sort_unstable();
        prop_assert_eq!(first, (0..n).collect::<Vec<_>>());
        prop_assert!(drawn.iter().all(|&i| i < n));
    }

    #[test]
    fn frechet_symmetric_and_nonnegative(d in 1usize..8, vals in prop::collection::vec(-1.0f64..1.0, 64 * 2 + 16)) {
        let mk = |off: usize| {
            let m = DMatrix::from_fn(d + 2, d, |i, j| vals[off + i * d + j]);
            FrechetStats {
                mean: DVector::from_fn(d, |i, _| vals[128 + i]),
                cov: m.transpose() * m,
                n: 10,
            }
        };
        let (a, b) = (mk(0), mk(64));
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-6 * (1.0 + ab));
        prop_assert!(frechet_distance(&a, &a).unwrap() <= 1e-6 * (1.0 + a.cov.trace()));
    }

    #[test]
    fn sqrt_of_square_is_identity(d in 1usize..10, vals in prop::collection::vec(-1.0f64..1.0, 100)) {
        let m = DMatrix::from_fn(d, d, |i, j| vals[i * 10 + j]);
        let b = m.transpose() * &m + DMatrix::identity(d, d);
        let bb = &b * &b;
        let back = matrix_sqrt_psd(&((&bb + bb.transpose()) * 0.5)).unwrap();
        prop_assert!((back - &b).amax() <= 1e-4);
    }

    #[test]
    fn frechet_grows_with_mean_shift(d in 1usize..6, t1 in 0.0f64..3.0, dt in 0.01f64..3.0) {
        let base = FrechetStats { mean: DVector::zeros(d), cov: DMatrix::identity(d, d), n: 10 };
        let at = |t: f64| FrechetStats { mean: DVector::from_element(d, t), ..base.clone() };
        let near = frechet_distance(&base, &at(t1)).unwrap();
        let far = frechet_distance(&base, &at(t1 + dt)).unwrap();
        prop_assert!(far > near);
    }
}
