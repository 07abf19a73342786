use contdepth::field::{ControlSignal, ControlledVectorField};
use contdepth::harness::train::{answer_probs, steering_train, SteerConfig};
use contdepth::harness::{SteeringTask, Tokenizer};
use contdepth::model::{checkpoint, Arch, Model, ModelConfig, TokenBatch};
use contdepth::solvers::{integrate, SolverConfig};
use contdepth::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(arch: Arch) -> ModelConfig {
    ModelConfig {
        n_layers: 4,
        d_model: 16,
        n_heads: 2,
        max_seq_len: 24,
        ode_replaces: (1, 3),
        ..ModelConfig::desk(Tokenizer::default().vocab_size())
    }
    .with_arch(arch)
}

fn tokens(seed: u64, n: usize, vocab: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(0..vocab)).collect()
}

#[test]
fn residual_update_equals_one_euler_step_at_unit_alpha() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut f = ControlledVectorField::<f64>::new(8, 1, 32, &mut rng);
    f.alpha = 1.0;
    let u = ControlSignal::new(vec![0.75]);
    let h: Vec<f64> = (0..24).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let h = Tensor::new(&[3, 8], h).unwrap();
    let residual = h.add(&f.eval(&h, 0.0, &u).unwrap()).unwrap();
    let euler = integrate(|x: &Tensor<f64>, t| f.eval(x, t, &u), &h, (0.0, 1.0), &SolverConfig::euler(1)).unwrap();
    assert_eq!(euler.final_state.data(), residual.data());
    assert_eq!(euler.nfe, 1);
}

#[test]
fn logits_are_causal() {
    for arch in [Arch::Baseline, Arch::Hybrid] {
        let m = Model::<f32>::new(small(arch), 2).unwrap();
        let mut t = tokens(1, 12, 96);
        let u = ControlSignal::new(vec![1.0]);
        let solver = SolverConfig::euler(4);
        let a = m.logits(&TokenBatch::new(t.clone(), 1, 12).unwrap(), Some(&u), &solver).unwrap().0;
        t[7] = (t[7] + 5) % 96;
        let b = m.logits(&TokenBatch::new(t, 1, 12).unwrap(), Some(&u), &solver).unwrap().0;
        let cut = 7 * 96;
        assert_eq!(&a.data()[..cut], &b.data()[..cut], "{arch}");
        assert_ne!(&a.data()[cut..], &b.data()[cut..], "{arch}");
    }
}

#[test]
fn construction_and_forward_are_deterministic() {
    let batch = TokenBatch::new(tokens(3, 20, 96), 2, 10).unwrap();
    let u = ControlSignal::new(vec![-0.5]);
    let run = || {
        let m = Model::<f32>::new(small(Arch::Hybrid), 11).unwrap();
        m.logits(&batch, Some(&u), &SolverConfig::dopri5(1e-4, 1e-7)).unwrap().0
    };
    assert_eq!(run().data(), run().data());
    let other = Model::<f32>::new(small(Arch::Hybrid), 12).unwrap();
    assert_ne!(run().data(), other.logits(&batch, Some(&u), &SolverConfig::euler(4)).unwrap().0.data());
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let m = Model::<f32>::new(small(Arch::Hybrid), 5).unwrap();
    checkpoint::save(&m, &path).unwrap();
    let back: Model<f32> = checkpoint::load(&path).unwrap();
    assert_eq!(back.config, m.config);
    for (a, b) in m.params.iter().zip(back.params.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.value, b.value);
    }
}

#[test]
fn steering_moves_only_the_ode_block() {
    let task = SteeringTask::new(&Tokenizer::default()).unwrap();
    let mut m = Model::<f32>::new(small(Arch::Hybrid), 9).unwrap();
    let frozen = |n: &str| !n.starts_with("ode.");
    let before = (m.params.checksum(frozen), m.params.checksum(|n| n.starts_with("ode.")));
    m.set_freeze_for_steering();
    let cfg = SteerConfig {
        steps: 3,
        lr: 1e-2,
        ..SteerConfig::default()
    };
    steering_train(&mut m, &task, &cfg, |_| Ok(())).unwrap();
    assert_eq!(m.params.checksum(frozen), before.0);
    assert_ne!(m.params.checksum(|n| n.starts_with("ode.")), before.1);
}

#[test]
fn steering_refuses_unfrozen_models() {
    let task = SteeringTask::new(&Tokenizer::default()).unwrap();
    let mut m = Model::<f32>::new(small(Arch::Hybrid), 9).unwrap();
    assert!(steering_train(&mut m, &task, &SteerConfig::default(), |_| Ok(())).is_err());
}

#[test]
fn fresh_field_barely_separates_polarities() {
    let task = SteeringTask::new(&Tokenizer::default()).unwrap();
    let m = Model::<f32>::new(small(Arch::Hybrid), 13).unwrap();
    let solver = SolverConfig::euler(4);
    let (plus, _) = answer_probs(&m, &task, 1.0, &solver).unwrap();
    let (minus, _) = answer_probs(&m, &task, -1.0, &solver).unwrap();
    assert!((plus - minus).abs() < 0.05, "{plus} vs {minus}");
}
