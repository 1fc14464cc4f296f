use super::*;
use crate::model::ModelConfig;

fn cfg(plan: &str, n: usize) -> ModelConfig {
    let mut c = ModelConfig::new(2, 8, 2, n, 4, 2).unwrap();
    c.vocab = 32;
    let plan = if plan.contains(';') { plan.to_string() } else { format!("{plan};{plan}") };
    c.with_plan(plan.parse().unwrap()).unwrap()
}

fn corpus(len: usize) -> Vec<u32> {
    (0..len).map(|i| ((i * 7 + i / 5) % 32) as u32).collect()
}

fn quick() -> TrainConfig {
    TrainConfig {
        optim: OptimConfig {
            lr: 1e-2,
            warmup: 10,
            ..Default::default()
        },
        batch: 2,
        eval_every: 5,
        eval_windows: 2,
        ..Default::default()
    }
}

#[test]
fn zero_steps_gives_only_initial_evaluation() {
    let toks = corpus(64);
    let (state, report) = train(cfg("local(4),routing(2)", 8), quick(), &toks, &[], 1, 0).unwrap();
    assert_eq!(state.step, 0);
    assert_eq!(report.rows.len(), 1);
    assert!(report.rows[0].eval.is_some() && report.rows[0].train.is_none());
    assert!(report.losses.is_empty());
}

#[test]
fn corpus_too_small_is_a_contract_violation() {
    let toks = corpus(8);
    let err = train(cfg("dense,dense", 8), quick(), &toks, &[], 1, 1).unwrap_err();
    assert!(matches!(err, Error::Contract(_)), "{err}");
}

#[test]
fn corpus_windows_wrap_around() {
    let toks: Vec<u32> = (0..10).collect();
    let src = CorpusWindows::new(&toks, 6).unwrap();
    let mut seen_wrap = false;
    for step in 0..50 {
        let w = src.window(3, step, 0, 6);
        assert_eq!(w.len(), 7);
        for pair in w.windows(2) {
            assert_eq!(pair[1], (pair[0] + 1) % 10);
        }
        seen_wrap |= w.contains(&9) && w.contains(&0);
        assert_eq!(w, src.window(3, step, 0, 6));
    }
    assert!(seen_wrap);
}

#[test]
fn eval_windows_are_contiguous_chunks() {
    let toks: Vec<u32> = (0..20).collect();
    let w = eval_windows(&toks, 4, 3).unwrap();
    assert_eq!(w, vec![vec![0, 1, 2, 3, 4], vec![5, 6, 7, 8, 9], vec![10, 11, 12, 13, 14]]);
    assert_eq!(eval_windows(&toks[..3], 4, 3).unwrap(), vec![vec![0, 1, 2, 0, 1]]);
}

#[test]
fn identical_seeds_give_identical_reports() {
    let toks = corpus(100);
    let plan = "routing(2),random(2);local(3),routing(2)";
    let (a, ra) = train(cfg(plan, 8), quick(), &toks, &[], 5, 12).unwrap();
    let (b, rb) = train(cfg(plan, 8), quick(), &toks, &[], 5, 12).unwrap();
    assert_eq!(ra.rows, rb.rows);
    assert_eq!(ra.losses, rb.losses);
    assert_eq!(ra.to_tsv(), rb.to_tsv());
    assert_eq!(a, b);
    let (_, rc) = train(cfg(plan, 8), quick(), &toks, &[], 6, 12).unwrap();
    assert_ne!(ra.losses, rc.losses);
}

#[test]
fn report_rows_are_monotone_and_cover_the_end() {
    let toks = corpus(100);
    let (_, r) = train(cfg("dense,local(2)", 8), quick(), &toks, &[], 2, 12).unwrap();
    let steps: Vec<u64> = r.rows.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![0, 5, 10, 12]);
    assert_eq!(r.losses.len(), 12);
    assert!(r.to_tsv().lines().count() == 5);
}

#[test]
fn one_centroid_update_per_routing_head_per_step() {
    let toks = corpus(100);
    let state = TrainState::new(cfg("routing(2),routing(2);local(2),random(2)", 8), 4).unwrap();
    let mut t = Trainer::new(state, quick()).unwrap();
    let src = CorpusWindows::new(&toks, 8).unwrap();
    for _ in 0..3 {
        let s = t.step(&src).unwrap();
        assert_eq!(s.centroid_updates, 2);
    }
    // Evaluation leaves centroids alone.
    let before = t.state.model.centroids.clone();
    evaluate(&t.state.model, &eval_windows(&toks, 8, 4).unwrap(), 0).unwrap();
    assert_eq!(before, t.state.model.centroids);
}

#[test]
fn checkpoint_resume_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let toks = corpus(100);
    let src = CorpusWindows::new(&toks, 8).unwrap();
    let c = cfg("routing(2),local(3);random(2),routing(2)", 8);
    let mut tc = quick();
    tc.checkpoint_every = 4;
    tc.checkpoint_dir = Some(dir.path().to_path_buf());

    let mut straight = Trainer::new(TrainState::new(c.clone(), 9).unwrap(), tc.clone()).unwrap();
    let mut losses = Vec::new();
    for _ in 0..6 {
        losses.push(straight.step(&src).unwrap().loss);
    }
    let ckpt = dir.path().join("step-00000004.rtck");
    let loaded = checkpoint::load(&ckpt, &c).unwrap();
    assert_eq!(loaded.step, 4);
    let mut resumed = Trainer::new(loaded, tc).unwrap();
    for want in &losses[4..] {
        assert_eq!(resumed.step(&src).unwrap().loss.to_bits(), want.to_bits());
    }
    assert_eq!(resumed.state, straight.state);
}

#[test]
fn nan_loss_aborts_with_checkpoint_reference() {
    let dir = tempfile::tempdir().unwrap();
    let toks = corpus(100);
    let src = CorpusWindows::new(&toks, 8).unwrap();
    let mut tc = quick();
    tc.checkpoint_every = 1;
    tc.checkpoint_dir = Some(dir.path().to_path_buf());
    let mut t = Trainer::new(TrainState::new(cfg("dense,dense", 8), 1).unwrap(), tc).unwrap();
    t.step(&src).unwrap();
    t.state.model.params.w_out.data_mut()[0] = f64::NAN;
    let err = t.step(&src).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    assert!(err.to_string().contains("step-00000001.rtck"), "{err}");
}

#[test]
fn loss_decreases_on_a_repetitive_corpus() {
    let toks = corpus(64);
    let (_, r) = train(cfg("local(4),routing(2)", 8), quick(), &toks, &[], 3, 60).unwrap();
    let first = r.rows[0].eval.unwrap().nats;
    let last = r.final_eval().unwrap().nats;
    assert!(last < first - 0.5, "{first} -> {last}");
}
