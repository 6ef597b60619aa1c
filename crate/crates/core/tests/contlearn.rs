mod common;

use std::sync::OnceLock;

use decode_core::adcore::{Tape, Tensor};
use decode_core::contlearn::{self, BaselineKind, ExpansionBatch, Framework};
use decode_core::error::DecodeError;
use decode_core::experiment::{self, Corpus};

struct Fixture {
    corpus: Corpus,
    pretrained: Framework,
    one_phase: Framework,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let cfg = common::tiny_config();
        let corpus = experiment::generate_corpus(&cfg).unwrap();
        let pretrained = contlearn::run_pretrain(&cfg, corpus.mix.train()).unwrap();
        let mut one_phase = pretrained.clone();
        let first = cfg.data.phases[0].clone();
        contlearn::run_expansion(&mut one_phase, corpus.domain(&first).unwrap().train(), 1, &first).unwrap();
        Fixture {
            corpus,
            pretrained,
            one_phase,
        }
    })
}

/// Wall time is not persisted.
fn without_wall_time(fw: &Framework) -> Framework {
    let mut fw = fw.clone();
    for e in fw.logs.iter_mut().flat_map(|l| l.epochs.iter_mut()) {
        e.wall_time = 0.0;
    }
    fw
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let fw = &without_wall_time(&fixture().one_phase);
    let bytes = contlearn::save_checkpoint(fw).unwrap();
    let back = contlearn::load_checkpoint(&bytes).unwrap();
    assert_eq!(&back, fw);
    assert_eq!(contlearn::save_checkpoint(&back).unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fw.ck");
    contlearn::write_checkpoint(&path, fw).unwrap();
    assert_eq!(&contlearn::read_checkpoint(&path).unwrap(), fw);
}

#[test]
fn flipped_payload_byte_is_reported_as_corruption() {
    let bytes = contlearn::save_checkpoint(&fixture().one_phase).unwrap();
    let mut bad = bytes.clone();
    let at = bytes.len() - 32 - 100;
    bad[at] ^= 0x40;
    match contlearn::load_checkpoint(&bad) {
        Err(DecodeError::Corrupted { offset, .. }) => assert!(offset as usize <= at),
        other => panic!("expected corruption, got {other:?}"),
    }
}

#[test]
fn malformed_checkpoints_are_rejected() {
    let bytes = contlearn::save_checkpoint(&fixture().pretrained).unwrap();
    let mut version = bytes.clone();
    version[9..13].copy_from_slice(&7u32.to_le_bytes());
    assert!(matches!(
        contlearn::load_checkpoint(&version),
        Err(DecodeError::UnsupportedVersion { found: 7, .. })
    ));
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(contlearn::load_checkpoint(&magic).is_err());
    for cut in [0, 5, 40, bytes.len() / 2, bytes.len() - 1] {
        assert!(contlearn::load_checkpoint(&bytes[..cut]).is_err(), "cut at {cut}");
    }
    let mut longer = bytes.clone();
    longer.push(0);
    assert!(contlearn::load_checkpoint(&longer).is_err());
}

#[test]
fn expansion_leaves_pretrained_parts_untouched() {
    let f = fixture();
    assert_eq!(f.one_phase.encoder, f.pretrained.encoder);
    assert_eq!(f.one_phase.generalized, f.pretrained.generalized);
    assert_eq!(f.one_phase.anchors, f.pretrained.anchors);
    assert_eq!(f.one_phase.phases_done(), 1);
    assert_eq!(f.one_phase.logs.len(), 2);
    assert_eq!(f.one_phase.logs[1].epochs.len(), f.one_phase.config.expansion.epochs);
}

#[test]
fn out_of_order_phase_is_rejected_without_side_effects() {
    let f = fixture();
    let mut fw = f.one_phase.clone();
    let name = fw.config.data.phases[1].clone();
    let train = f.corpus.domain(&name).unwrap().train();
    assert!(matches!(
        contlearn::run_expansion(&mut fw, train, 3, &name),
        Err(DecodeError::Phase(_))
    ));
    assert!(contlearn::run_expansion(&mut fw, &[], 2, &name).is_err());
    assert_eq!(fw, f.one_phase);
}

#[test]
fn loss_terms_assemble_exactly() {
    let f = fixture();
    let mut fw = f.one_phase.clone();
    fw.begin_phase(2).unwrap();
    let name = fw.config.data.phases[1].clone();
    let scenes = &f.corpus.domain(&name).unwrap().train()[..12];
    let batch = ExpansionBatch::from_scenes(&fw, scenes).unwrap();
    let tape = Tape::new();
    let vars = fw.hyper.vars(&tape);
    let q = fw.hyper.queries.last().unwrap().q.clone();
    let qv = tape.param(Tensor::row(q));
    let l = contlearn::expansion_loss(&tape, &fw, &vars, qv, &batch).unwrap();
    let c = &fw.config.loss;
    let motion = tape.item(l.bayes) + c.regression_weight * tape.item(l.regression);
    assert!((tape.item(l.motion) - motion).abs() < 1e-12);
    let total = tape.item(l.motion) + c.beta_domain * tape.item(l.domain) + tape.item(l.reg);
    assert!((tape.item(l.total) - total).abs() < 1e-12);
    let reg = fw.hyper.reg_loss(c.lambda).unwrap();
    assert!((tape.item(l.reg) - reg).abs() < 1e-12 * (1.0 + reg));

    let probe = contlearn::probe_loss(&fw, scenes).unwrap();
    assert!((probe.total - tape.item(l.total)).abs() < 1e-12);
}

#[test]
fn baselines_respect_their_definitions() {
    let f = fixture();
    let plan = &f.pretrained.config.data.phases;
    let frozen = experiment::baseline_staircase(BaselineKind::FrozenGeneralized, &f.pretrained, &f.corpus).unwrap();
    assert_eq!(frozen.fgt_ade, 0.0);
    assert_eq!(frozen.ade.n(), plan.len());
    let again = experiment::baseline_staircase(BaselineKind::NaiveFinetune, &f.pretrained, &f.corpus).unwrap();
    let twice = experiment::baseline_staircase(BaselineKind::NaiveFinetune, &f.pretrained, &f.corpus).unwrap();
    assert_eq!(again, twice);
}

#[test]
fn tiny_pipeline_is_reproducible() {
    let cfg = common::tiny_config();
    let corpus = experiment::generate_corpus(&cfg).unwrap();
    let a = experiment::run_pipeline(&cfg, &corpus).unwrap();
    let b = experiment::run_pipeline(&cfg, &corpus).unwrap();
    assert_eq!(a.checkpoints, b.checkpoints);
    assert_eq!(a.report.to_json().unwrap(), b.report.to_json().unwrap());
    assert_eq!(a.checkpoints.len(), cfg.data.phases.len() + 1);
    let last = a.report.phases.last().unwrap();
    assert_eq!(last.drift.len(), cfg.data.phases.len() - 1);
    assert_eq!(a.report.decode.to_csv().lines().count(), 1 + 6);
}
