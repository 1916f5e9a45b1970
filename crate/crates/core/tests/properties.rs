use ndarray::Array2;
use proptest::prelude::*;

use beta_core::data::{corrupt, gen_source, make_stream, CorruptionKind, CorruptionSpec, ImageDims, StreamMode};
use beta_core::net::{Architecture, Mlp};
use beta_core::prob::{cosine, entropy, harmonize, js_alpha, kl, reliability_weight, ProbVector};
use beta_core::prompt::FramePrompt;
use beta_core::service::cost_of;

fn simplex(k: usize) -> impl Strategy<Value = ProbVector> {
    prop::collection::vec(1e-6f64..1.0, k).prop_map(|v| {
        let s: f64 = v.iter().sum();
        ProbVector::new(v.iter().map(|x| x / s).collect()).unwrap()
    })
}

fn pair() -> impl Strategy<Value = (ProbVector, ProbVector)> {
    (2usize..16).prop_flat_map(|k| (simplex(k), simplex(k)))
}

fn binary_entropy(a: f64) -> f64 {
    let t = |x: f64| if x > 0.0 { -x * x.ln() } else { 0.0 };
    t(a) + t(1.0 - a)
}

proptest! {
    #[test]
    fn harmonized_is_a_distribution((p, q) in pair(), alpha in 0.0f64..=1.0) {
        let h = harmonize(&p, &q, alpha).unwrap();
        prop_assert!((h.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(h.as_slice().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn entropy_is_bounded_by_log_k(p in (2usize..32).prop_flat_map(simplex)) {
        let h = entropy(&p);
        prop_assert!(h >= 0.0 && h <= (p.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn mixing_never_lowers_entropy((p, q) in pair(), alpha in 0.0f64..=1.0) {
        let h = entropy(&harmonize(&p, &q, alpha).unwrap());
        prop_assert!(h + 1e-12 >= alpha * entropy(&p) + (1.0 - alpha) * entropy(&q));
    }

    #[test]
    fn weighted_divergence_is_bounded((p, q) in pair(), alpha in 0.0f64..=1.0) {
        let js = js_alpha(&p, &q, alpha).unwrap();
        prop_assert!(js >= -1e-12);
        prop_assert!(js <= binary_entropy(alpha) + 1e-12);
        prop_assert!(js_alpha(&p, &p, alpha).unwrap().abs() < 1e-12);
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_the_diagonal((p, q) in pair()) {
        prop_assert!(kl(&p, &q).unwrap() >= -1e-12);
        prop_assert!(kl(&p, &p).unwrap().abs() < 1e-12);
    }

    #[test]
    fn reliability_weight_decreases_with_entropy(a in 0.0f64..5.0, b in 0.0f64..5.0, eps in 0.01f64..5.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let (wl, wh) = (reliability_weight(lo, eps).unwrap(), reliability_weight(hi, eps).unwrap());
        prop_assert!(wl >= wh);
        prop_assert!(wh >= 0.0 && wl <= eps.exp());
        prop_assert_eq!(reliability_weight(eps, eps).unwrap(), 0.0);
    }

    #[test]
    fn cosine_is_symmetric_and_bounded(v in prop::collection::vec(-1.0f64..1.0, 1..20)) {
        let w: Vec<f64> = v.iter().rev().copied().collect();
        let c = cosine(&v, &w);
        prop_assert!((c - cosine(&w, &v)).abs() < 1e-12);
        prop_assert!(c.abs() <= 1.0 + 1e-12);
    }

    #[test]
    fn costs_add_up(a in 0u64..1_000_000, b in 0u64..1_000_000) {
        let price = 0.0032;
        prop_assert!((cost_of(a + b, price) - cost_of(a, price) - cost_of(b, price)).abs() < 2e-4);
    }

    #[test]
    fn corruptions_stay_in_the_unit_cube(kind in 0usize..5, severity in 0u8..=5, seed in 0u64..1000) {
        let dims = ImageDims::new(6, 6, 3).unwrap();
        let x = gen_source(3, 9, dims, seed).unwrap().images;
        let spec = CorruptionSpec::new(CorruptionKind::ALL[kind], severity, seed).unwrap();
        let y = corrupt(&x, dims, &spec).unwrap();
        prop_assert_eq!(y.dim(), x.dim());
        prop_assert!(y.iter().all(|&v| (0.0..=1.0).contains(&v)));
        if severity == 0 {
            prop_assert_eq!(&y, &x);
        }
        prop_assert_eq!(y, corrupt(&x, dims, &spec).unwrap());
    }

    #[test]
    fn streams_visit_every_sample_once(n in 6usize..60, batch in 1usize..20, seed in 0u64..100, skew in 0.0f64..=1.0, imbalanced: bool) {
        let dims = ImageDims::new(3, 3, 1).unwrap();
        let set = gen_source(3, n, dims, seed).unwrap();
        prop_assume!(batch <= set.len());
        let mode = if imbalanced { StreamMode::LabelImbalance { skew } } else { StreamMode::Iid };
        let (mut stream, book) = make_stream(&set, mode, batch, seed).unwrap();
        prop_assert_eq!(stream.samples(), set.len());
        let mut ids: Vec<u64> = Vec::new();
        for b in stream.take().unwrap() {
            prop_assert!(b.len() <= batch && !b.is_empty());
            ids.extend(&b.ids);
        }
        prop_assert!(stream.take().is_err());
        ids.sort_unstable();
        ids.dedup();
        prop_assert_eq!(ids.len(), set.len());
        prop_assert_eq!(book.len(), set.len());
    }

    #[test]
    fn prompts_touch_only_the_frame(h in 3usize..10, w in 3usize..10, f in 1usize..3, sigma in 0.01f64..0.5, seed in 0u64..100) {
        prop_assume!(2 * f < h.min(w));
        let dims = ImageDims::new(h, w, 2).unwrap();
        let p = FramePrompt::init_gaussian(dims, f, sigma, seed).unwrap();
        let x = Array2::from_elem((2, dims.len()), 0.5);
        let y = p.apply(&x).unwrap();
        for r in 0..h {
            for c in 0..w {
                let inside = r >= f && r < h - f && c >= f && c < w - f;
                for ch in 0..2 {
                    let i = dims.index(r, c, ch);
                    if inside {
                        prop_assert_eq!(y[[0, i]], 0.5);
                    }
                }
            }
        }
        let zero = FramePrompt::zeros(dims, f).unwrap();
        prop_assert_eq!(zero.apply(&x).unwrap(), x);
    }

    #[test]
    fn network_outputs_are_distributions(seed in 0u64..50, rows in 1usize..6) {
        let dims = ImageDims::new(4, 4, 1).unwrap();
        let net = Mlp::init(Architecture::new(dims.len(), vec![8, 6], 5).unwrap(), seed);
        let x = gen_source(5, 10, dims, seed).unwrap().images.slice(ndarray::s![0..rows.min(10), ..]).to_owned();
        for p in net.predict_probs(&x).unwrap() {
            prop_assert!((p.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
