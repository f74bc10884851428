use rashomon_core::config::AlphaUpdate;
use rashomon_core::data::{self, Split};
use rashomon_core::metrics;
use rashomon_core::train::{self, Adam, LossBreakdown};
use rashomon_core::{ConceptDataset, Mode, RashomonSlice, RunConfig};

fn small() -> RunConfig {
    let mut c = RunConfig::default();
    c.data.n = 400;
    c.model.m = 3;
    c.model.hidden = vec![16, 16];
    c.model.attach = vec![0, 1];
    c.eval.eigvec_k = 4;
    c.train.learning_rate = 0.01;
    c.train.max_epochs = 4;
    c
}

fn setup(cfg: &RunConfig) -> (RashomonSlice, ConceptDataset) {
    cfg.validate().unwrap();
    let d = data::generate(&cfg.planted()).unwrap();
    let s = RashomonSlice::new(cfg.slice_spec(d.input_dim(), d.p(), d.classes()), cfg.seed).unwrap();
    (s, d)
}

fn bits(s: &RashomonSlice) -> Vec<Vec<u64>> {
    s.snapshot().iter().map(|t| t.values().iter().map(|v| v.to_bits()).collect()).collect()
}

fn trained(cfg: &RunConfig) -> (RashomonSlice, ConceptDataset, Vec<train::TrainState>) {
    let (mut s, d) = setup(cfg);
    let st = train::train(&mut s, &d, &cfg.train, cfg.seed, None).unwrap();
    (s, d, st)
}

#[test]
fn zero_learning_rate_step_changes_nothing() {
    let cfg = small();
    let (mut s, d) = setup(&cfg);
    let before = bits(&s);
    let mut opt = Adam::new(&s, s.trainable_indices(), 0.0);
    let batch = d.rows(&d.indices(Split::Train)[..64]);
    let members: Vec<usize> = (0..s.m()).collect();
    train::train_step(&mut s, &mut opt, &batch, &members, &cfg.train, 0.5, 9).unwrap();
    assert_eq!(before, bits(&s));
}

#[test]
fn same_seed_gives_identical_weights() {
    let cfg = small();
    let (a, _, sa) = trained(&cfg);
    let (b, _, sb) = trained(&cfg);
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(sa, sb);
    let mut other = small();
    other.seed = 8;
    assert_ne!(bits(&a), bits(&trained(&other).0));
}

#[test]
fn checkpointing_does_not_change_the_trajectory() {
    let mut on = small();
    on.train.checkpointing = true;
    let mut off = on.clone();
    off.train.checkpointing = false;
    let (a, _, sa) = trained(&on);
    let (b, _, sb) = trained(&off);
    let diff = a
        .snapshot()
        .iter()
        .zip(b.snapshot())
        .map(|(x, y)| x.max_abs_diff(&y))
        .fold(0.0, f64::max);
    assert!(diff < 1e-10, "max abs diff {diff}");
    for (ra, rb) in sa[0].log.iter().zip(&sb[0].log) {
        assert!((ra.val.total - rb.val.total).abs() < 1e-10);
    }
}

#[test]
fn backbone_stays_frozen() {
    let cfg = small();
    let (mut s, d) = setup(&cfg);
    let digest = s.backbone_digest();
    train::train(&mut s, &d, &cfg.train, cfg.seed, None).unwrap();
    assert_eq!(digest, s.backbone_digest());
}

#[test]
fn logged_totals_reconstruct_from_components() {
    let (_, _, st) = trained(&small());
    let check = |b: &LossBreakdown| {
        assert!((b.reconstruct() - b.total).abs() <= 1e-12, "{b:?}");
        assert!(b.per_model_div.iter().all(|d| (0.0..=2.0).contains(d)));
    };
    for r in &st[0].log {
        check(&r.last_step);
        check(&r.val);
    }
}

#[test]
fn alpha_range_and_fixed_schedule() {
    let (_, _, st) = trained(&small());
    assert!(st[0].alpha_history.iter().all(|&a| a > 0.0 && a < 1.0));
    let mut fixed = small();
    fixed.train.alpha = AlphaUpdate::Fixed(0.3);
    let (_, _, st) = trained(&fixed);
    assert!(st[0].alpha_history.iter().all(|&a| a == 0.3));
    assert!(st[0].log.iter().all(|r| r.last_step.alpha == 0.3));
}

#[test]
fn initial_alpha_on_planted_data_is_in_sanity_band() {
    let mut cfg = RunConfig::default();
    cfg.train.max_epochs = 1;
    cfg.train.learning_rate = 0.01;
    let (_, _, st) = trained(&cfg);
    let a = st[0].alpha_history[1];
    assert!(a > 0.4 && a < 0.7, "alpha after the first epoch: {a}");
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[test]
fn hard_max_routes_gradient_to_the_worst_member() {
    let mut cfg = small();
    cfg.model.m = 4;
    cfg.train.max_epochs = 2;
    let (s, d, _) = trained(&cfg);
    let batch = d.rows(&d.indices(Split::Train)[..64]);
    let members: Vec<usize> = (0..4).collect();
    let zero = |g: &Option<rashomon_core::Tensor>| g.as_ref().unwrap().values().iter().all(|&v| v == 0.0);
    for alpha in [0.0, 0.5] {
        let sg = train::loss_and_grads(&s, &batch, &members, &cfg.train, alpha, 5, true).unwrap();
        let (wp, wc) = (argmax(&sg.breakdown.per_model_pr), argmax(&sg.breakdown.per_model_c));
        for m in 0..4 {
            let cls = s.classifier(m);
            assert_eq!(zero(&sg.grads[cls.w]), m != wp, "classifier of member {m}, alpha {alpha}");
            let head = s.head(m);
            let head_zero = zero(&sg.grads[head.w]);
            if m != wp && m != wc {
                assert_eq!(head_zero, alpha == 0.0, "head of member {m}, alpha {alpha}");
            }
        }
    }
}

#[test]
fn patience_one_stops_early_on_separable_data() {
    let mut cfg = small();
    cfg.data.noise_std = 0.0;
    cfg.data.flip_rate = 0.0;
    cfg.train.patience = 1;
    cfg.train.max_epochs = 200;
    cfg.train.learning_rate = 0.05;
    let (s, d, st) = trained(&cfg);
    assert!(st[0].stopped_early, "ran all {} epochs", st[0].epoch + 1);
    let best = st[0].best_epoch;
    let alpha = st[0].alpha_history[best];
    let members: Vec<usize> = (0..s.m()).collect();
    let restored = train::evaluate_objective(&s, &d.split(Split::Val), &members, &cfg.train, alpha).unwrap();
    assert_eq!(restored.total, st[0].best_val_total);
}

#[test]
fn empty_validation_split_is_rejected() {
    let cfg = small();
    let (mut s, mut d) = setup(&cfg);
    d.splits.val.clear();
    let err = train::train(&mut s, &d, &cfg.train, 1, None).unwrap_err();
    assert!(err.to_string().contains("splits"), "{err}");
}

#[test]
fn mode_mismatch_is_rejected() {
    let cfg = small();
    let (mut s, d) = setup(&cfg);
    let mut other = cfg.train.clone();
    other.mode = Mode::X2c;
    let err = train::train(&mut s, &d, &other, 1, None).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn c2y_members_share_their_concepts() {
    let mut cfg = small();
    cfg.train.mode = Mode::C2y;
    let (s, d, _) = trained(&cfg);
    let r = metrics::evaluate(&s, &d, Split::Test, &cfg.eval, "").unwrap();
    assert!(r.concept_cka.values.iter().flatten().all(|&v| v == 1.0));
}

#[test]
fn random_init_members_follow_their_seeds() {
    let mut cfg = small();
    cfg.train.mode = Mode::RandomInit;
    cfg.train.member_seeds = vec![5, 5, 5];
    let (s, d, st) = trained(&cfg);
    assert_eq!(st.len(), 3);
    let r = metrics::evaluate(&s, &d, Split::Test, &cfg.eval, "").unwrap();
    assert_eq!(r.hamming.off_mean, Some(0.0));

    cfg.train.member_seeds = vec![5, 6, 7];
    let (s, d, _) = trained(&cfg);
    let r = metrics::evaluate(&s, &d, Split::Test, &cfg.eval, "").unwrap();
    assert!(r.hamming.off_mean.unwrap() > 0.0);
    assert!(st.iter().all(|t| t.log.iter().all(|l| l.last_step.per_model_div.is_empty())));
}

#[test]
fn single_member_trains_without_diversity() {
    let mut cfg = small();
    cfg.model.m = 1;
    let (_, _, st) = trained(&cfg);
    assert!(st[0].log.iter().all(|r| r.val.per_model_div.is_empty()));
}
