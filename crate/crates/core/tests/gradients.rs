use ftm_core::autodiff::gradcheck::{check_gradients, primitive_suite, rand_t};
use ftm_core::autodiff::{ops, Tensor, Var};
use ftm_core::config::{ModelConfig, SummaryKind};
use ftm_core::encoder::{AttnMode, Encoder};
use ftm_core::losses::{ctc_loss, frame_xe, multitask_loss, PhoneLabels};
use ftm_core::model::{init_params, Bound, Ctx};
use ftm_core::summary::head_logits;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

#[test]
fn every_primitive_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..3 {
        for case in primitive_suite(&mut rng) {
            let r = check_gradients(&case.inputs, STEP, &case.f).unwrap();
            assert!(r.max_rel_err <= TOL, "{} trial {trial}: {r:?}", case.name);
        }
    }
}

#[test]
fn losses_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..5 {
        let t = rng.random_range(4..9);
        let logits = rand_t(&mut rng, &[t, 2]);
        let r = check_gradients(&[logits], STEP, |v| frame_xe(&v[0], 1, None)).unwrap();
        assert!(r.max_rel_err <= TOL, "frame_xe {r:?}");

        let labels = PhoneLabels::new(vec![1, 3, 3], 4).unwrap();
        let raw = rand_t(&mut rng, &[t.max(5), 5]);
        let r = check_gradients(&[raw], STEP, |v| ctc_loss(&ops::log_softmax(&v[0])?, &labels)).unwrap();
        assert!(r.max_rel_err <= TOL, "ctc {r:?}");

        let a = rand_t(&mut rng, &[t, 2]);
        let b = rand_t(&mut rng, &[t, 5]);
        let r = check_gradients(&[a, b], STEP, |v| {
            let xe = frame_xe(&v[0], 0, None)?;
            let ctc = ctc_loss(&ops::log_softmax(&v[1])?, &labels)?;
            multitask_loss(&xe, &ctc, 0.7)
        })
        .unwrap();
        assert!(r.max_rel_err <= TOL, "multitask {r:?}");
    }
}

/// Gradient of every parameter of a tiny model through the masked encoder
/// and each summary head, checked against finite differences.
#[test]
fn whole_model_gradients() {
    for kind in SummaryKind::ALL {
        let cfg = ModelConfig {
            input_dim: 3,
            n_layers: 1,
            d_model: 4,
            n_heads: 2,
            d_ff: 5,
            block_shift: 4,
            k1: 2,
            s1: 2,
            k2: 4,
            s2: 2,
            tcn_channels: 3,
            tcn_units: 2,
            lstm_hidden: 3,
            lstm_avg_frames: 3,
            save_hidden: 3,
            dropout: 0.0,
            phone_alphabet: 3,
            summary_kind: kind,
            ..ModelConfig::default()
        };
        let store = init_params::<f64>(&cfg, 5).unwrap();
        let names: Vec<String> = store.names().map(str::to_string).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // Jitter so zero-initialised biases do not sit exactly on ReLU kinks.
        let values: Vec<Tensor<f64>> = names
            .iter()
            .map(|n| {
                let t = store.get(n).unwrap();
                t.zip_map(&rand_t(&mut rng, t.shape()), |a, b| a + 0.3 * b)
            })
            .collect();
        let x = rand_t(&mut rng, &[10, 3]);
        let labels = PhoneLabels::new(vec![1, 2], 3).unwrap();
        let r = check_gradients(&values, STEP, |vars| {
            let p = Bound::from_vars(names.iter().cloned().zip(vars.iter().cloned()));
            let mut ctx = Ctx::eval();
            let z = Encoder::new(&cfg, &p).forward(&Var::constant(x.clone()), AttnMode::Masked, &mut ctx)?;
            let logits = head_logits(kind, &cfg, &p, &z, &mut ctx)?;
            let xe = frame_xe(&logits, 1, None)?;
            let phone = ops::log_softmax(&ops::linear(&z, p.get("phone.w")?, p.get("phone.b")?)?)?;
            multitask_loss(&xe, &ctc_loss(&phone, &labels)?, 1.0)
        })
        .unwrap();
        assert!(r.max_rel_err <= TOL, "{kind}: {} {r:?}", names[r.input]);
    }
}
