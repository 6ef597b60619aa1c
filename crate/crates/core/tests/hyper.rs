use decode_core::adcore::{AdamW, AdamWConfig, Tape, Tensor};
use decode_core::bundle::{Manifest, TargetKind};
use decode_core::hyper::{self, HyperSpec, HypernetState};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn targets() -> (Manifest, Manifest) {
    let head = Manifest::new(TargetKind::DecoderHead).dense("a", 3, 5).dense("b", 5, 2);
    let flow = Manifest::new(TargetKind::Flow).dense("c", 2, 4);
    (head, flow)
}

fn state(seed: u64) -> HypernetState {
    let spec = HyperSpec {
        d_q: 4,
        d_b: 4,
        trunk_hidden: vec![16],
        chunk_decoder: 7,
        chunk_flow: 5,
    };
    let (h, f) = targets();
    HypernetState::new(spec, h, f, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn generated_bundles_match_target_manifests() {
    let mut st = state(1);
    let id = st.add_query(&mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let (h, f) = targets();
    let head = st.hypernet_forward(id, TargetKind::DecoderHead).unwrap();
    assert_eq!(head.manifest, h);
    assert_eq!(head.flat.len(), h.total());
    let flow = st.hypernet_forward(id, TargetKind::Flow).unwrap();
    assert_eq!(flow.flat.len(), f.total());
    assert!(st.hypernet_forward(id, TargetKind::Encoder).is_err());
    assert_eq!(st.generator(TargetKind::DecoderHead).unwrap().n_chunks(), h.total().div_ceil(7));
}

#[test]
fn tape_generation_equals_plain_generation() {
    let mut st = state(3);
    let id = st.add_query(&mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let q = st.query(id).unwrap().q.clone();
    let tape = Tape::new();
    let vars = st.vars(&tape);
    let qv = tape.constant(Tensor::row(q));
    let g = st.generator(TargetKind::Flow).unwrap();
    let on_tape = g.generate_tape(&tape, qv, vars.flow_trunk, vars.flow_bank).unwrap();
    let plain = st.hypernet_forward(id, TargetKind::Flow).unwrap();
    assert_eq!(tape.value(on_tape).data(), plain.flat.as_slice());
}

#[test]
fn reg_loss_is_sum_of_squared_output_changes() {
    let mut st = state(5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let id = st.add_query(&mut rng).unwrap();
    st.finalize_phase().unwrap();
    assert_eq!(st.reg_loss(3.0).unwrap(), 0.0);
    let before_h = st.hypernet_forward(id, TargetKind::DecoderHead).unwrap().flat;
    let before_f = st.hypernet_forward(id, TargetKind::Flow).unwrap().flat;
    for b in st.buffers_mut() {
        for (i, v) in b.iter_mut().enumerate() {
            *v += 1e-3 * ((i % 5) as f64 - 2.0);
        }
    }
    let after_h = st.hypernet_forward(id, TargetKind::DecoderHead).unwrap().flat;
    let after_f = st.hypernet_forward(id, TargetKind::Flow).unwrap().flat;
    let sq: f64 = before_h
        .iter()
        .zip(&after_h)
        .chain(before_f.iter().zip(&after_f))
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    assert!(sq > 0.0);
    assert!((st.reg_loss(3.0).unwrap() - 3.0 * sq).abs() < 1e-12 * (1.0 + sq));
    assert_eq!(st.reg_loss(0.0).unwrap(), 0.0);
    let worst = before_h
        .iter()
        .zip(&after_h)
        .chain(before_f.iter().zip(&after_f))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert_eq!(st.drift(id).unwrap(), worst);
}

#[test]
fn phase_bookkeeping() {
    let mut st = state(7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    assert!(st.finalize_phase().is_err());
    let a = st.add_query(&mut rng).unwrap();
    assert!(st.add_query(&mut rng).is_err());
    assert_eq!(st.finalize_phase().unwrap(), a);
    let b = st.add_query(&mut rng).unwrap();
    assert_eq!((a, b), (1, 2));
    assert_eq!(st.finalized_count(), 1);
    assert!(st.drift(b).is_err());
}

/// Fits query 2 to a fixed target with and without the output regulariser and
/// compares how far query 1 moves.
fn drift_after_fitting(lambda: f64) -> f64 {
    let mut st = state(9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let first = st.add_query(&mut rng).unwrap();
    st.finalize_phase().unwrap();
    let second = st.add_query(&mut rng).unwrap();
    let mut q = st.query(second).unwrap().q.clone();
    let target = vec![0.5; st.generator(TargetKind::DecoderHead).unwrap().target.total()];
    let sizes: Vec<usize> = st.buffers_mut().iter().map(|b| b.len()).chain([q.len()]).collect();
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: 1e-2,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        },
        &sizes,
    );
    for _ in 0..200 {
        let tape = Tape::new();
        let vars = st.vars(&tape);
        let qv = tape.param(Tensor::row(q.clone()));
        let gen = st.generator(TargetKind::DecoderHead).unwrap();
        let out = gen.generate_tape(&tape, qv, vars.decoder_trunk, vars.decoder_bank).unwrap();
        let diff = tape.sub(out, tape.constant(Tensor::row(target.clone()))).unwrap();
        let fit = tape.sum(tape.square(diff));
        let reg = st.reg_loss_tape(&tape, &vars, lambda).unwrap();
        let loss = tape.add(fit, reg).unwrap();
        let mut g = tape.backward(loss).unwrap();
        let grads = [
            g.take(vars.decoder_trunk),
            g.take(vars.decoder_bank),
            g.take(vars.flow_trunk),
            g.take(vars.flow_bank),
            g.take(qv),
        ];
        let [a, b, c, d] = st.buffers_mut();
        opt.step(&mut [a, b, c, d, &mut q], &grads).unwrap();
    }
    st.drift(first).unwrap()
}

#[test]
fn regulariser_limits_drift_of_earlier_queries() {
    let free = drift_after_fitting(0.0);
    let held = drift_after_fitting(100.0);
    assert!(held < 0.25 * free, "held {held} vs free {free}");
}

proptest! {
    #[test]
    fn mip_output_has_unit_norm(q in prop::collection::vec(-1e3f64..1e3, 1..40)) {
        let m = hyper::mip_transform(&q);
        prop_assert_eq!(m.len(), 2 * q.len());
        let n: f64 = m.iter().map(|v| v * v).sum();
        prop_assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn random_queries_lie_in_the_principal_interval(seed in any::<u64>()) {
        let q = hyper::random_query(16, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!(q.iter().all(|v| v.abs() <= std::f64::consts::PI));
    }
}
