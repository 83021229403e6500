mod common;

use useg::autodiff::Graph;
use useg::exec::{self, Mode};
use useg::losses::{self, kl_divergence, remap_new, remap_old, KlOrder};
use useg::phantom::{generate_dataset, to_first_k_organs, to_single_organ, PhantomConfig, PhantomSample};
use useg::trainer::objective::{distill_terms, LossWeights};
use useg::trainer::{distill_from, distill_incremental, evaluate, train_teacher, TeacherConfig, TrainConfig, TrainError};
use useg::uncertainty::{entropy_of_mean, weight_from_uncertainty};
use useg::{ProbMap, SegModel, SegModelConfig, Tensor, WeightMode};

fn small_phantoms(n: usize, seed: u64) -> Vec<PhantomSample> {
    let cfg = PhantomConfig { size: 16, radius: [2.0, 3.5], ..PhantomConfig::default() };
    generate_dataset(&cfg, n, seed).unwrap()
}

fn teacher_for(samples: &[PhantomSample], epochs: usize) -> SegModel {
    let data: Vec<_> = samples.iter().map(|s| to_first_k_organs(s, 2, 3).unwrap()).collect();
    let mut cfg = SegModelConfig::new(3);
    cfg.hidden = vec![4, 6];
    train_teacher(&data, cfg, &TeacherConfig { epochs, ..TeacherConfig::default() }).unwrap().0
}

fn new_organ(samples: &[PhantomSample]) -> Vec<PhantomSample> {
    samples.iter().map(|s| to_single_organ(s, 3, 3).unwrap()).collect()
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, q: 2, ..TrainConfig::default() }
}

#[test]
fn teacher_overfits_a_single_sample() {
    let s = small_phantoms(1, 3);
    let data: Vec<_> = s.iter().map(|s| to_first_k_organs(s, 2, 3).unwrap()).collect();
    let cfg = TeacherConfig { epochs: 150, batch_size: 1, ..TeacherConfig::default() };
    let (m, logs) = train_teacher(&data, SegModelConfig::new(3), &cfg).unwrap();
    assert!(m.is_frozen());
    let r = evaluate(&m, &data, &[1, 2]).unwrap();
    assert!(r.mean_dice >= 0.95, "{r:?}");
    assert!(logs.last().unwrap().l_total < logs[0].l_total);
}

#[test]
fn teacher_training_is_deterministic() {
    let s = small_phantoms(4, 1);
    assert_eq!(teacher_for(&s, 3).to_bytes(), teacher_for(&s, 3).to_bytes());
}

#[test]
fn distillation_never_touches_the_teacher() {
    let s = small_phantoms(4, 2);
    let teacher = teacher_for(&s, 2);
    let before = teacher.to_bytes();
    let out = distill_incremental(&teacher, &new_organ(&s), &quick(2)).unwrap();
    assert_eq!(teacher.to_bytes(), before);
    assert_eq!(out.student.classes(), 4);
    assert_eq!(out.logs.len(), 2);
    assert!(out.logs.iter().all(|l| l.l_total.is_finite() && l.mean_u.is_some()));
}

#[test]
fn zero_loss_weights_leave_only_weight_decay() {
    let s = small_phantoms(2, 4);
    let teacher = teacher_for(&s, 1);
    let student = teacher.extend_for_increment(1, 5).unwrap();
    let cfg = TrainConfig { epochs: 1, batch_size: 2, lambda1: 0.0, lambda2: 0.0, lambda3: 0.0, ..TrainConfig::default() };
    let out = distill_from(&teacher, student.clone(), &new_organ(&s), &cfg).unwrap();
    let shrink = 1.0 - cfg.lr * cfg.weight_decay;
    for (a, b) in out.student.params().iter().zip(student.params()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(*x, y * shrink);
        }
    }
}

#[test]
fn unit_weights_reduce_to_plain_divergences() {
    let s = small_phantoms(1, 6);
    let teacher = teacher_for(&s, 1);
    let student = teacher.extend_for_increment(1, 7).unwrap();
    let target = losses::smooth_labels(&new_organ(&s)[0].labels).unwrap();
    let p_t = teacher.predict_probs(&s[0].image).unwrap();

    // A one-hot ensemble has zero entropy everywhere, so confidence weights are 1.
    let onehot = {
        let (c, plane) = (p_t.channels(), p_t.plane());
        let mut d = vec![0.0; c * plane];
        d[..plane].fill(1.0);
        ProbMap::new(Tensor::new(p_t.tensor().shape().to_vec(), d).unwrap()).unwrap()
    };
    let ones = weight_from_uncertainty(&entropy_of_mean(&[onehot]).unwrap(), WeightMode::Confidence);
    assert!(ones.data().iter().all(|&w| w == 1.0));

    let lw = LossWeights { lambda1: 0.0, lambda2: 1.0, lambda3: 1.0, kl_order: KlOrder::AsPaper };
    let mut g = Graph::new();
    let params = student.register(&mut g);
    let terms = distill_terms(&mut g, &student, &params, &s[0].image, &p_t, &ones, &target, lw).unwrap();
    let total = g.value(terms.total).item();

    let mut h = Graph::new();
    let probs = h.leaf(student.predict_probs(&s[0].image).unwrap().into_tensor());
    let old = remap_old(&mut h, probs, 2).unwrap();
    let new = remap_new(&mut h, probs, 2).unwrap();
    let kl = kl_divergence(&mut h, &p_t, old).unwrap();
    let ln = losses::loss_new(&mut h, new, &target, KlOrder::AsPaper).unwrap();
    let want = h.value(kl).item() + h.value(ln).item();
    assert!((total - want).abs() < 1e-12, "{total} vs {want}");
}

#[test]
fn pipeline_is_deterministic_across_execution_modes() {
    let s = small_phantoms(4, 8);
    let run = |mode| {
        exec::set_mode(mode);
        let teacher = teacher_for(&s, 2);
        let out = distill_incremental(&teacher, &new_organ(&s), &quick(2)).unwrap();
        let r = evaluate(&out.student, &s, &[1, 2, 3]).unwrap();
        exec::set_mode(Mode::Parallel);
        (out.student.to_bytes(), serde_json::to_string(&r).unwrap(), format!("{:?}", out.logs))
    };
    let a = run(Mode::Parallel);
    assert_eq!(a, run(Mode::Parallel));
    assert_eq!(a, run(Mode::Sequential));
}

#[test]
fn off_mode_and_cache_behave() {
    let s = small_phantoms(3, 9);
    let teacher = teacher_for(&s, 1);
    let data = new_organ(&s);
    let off = distill_incremental(&teacher, &data, &TrainConfig { uncertainty: WeightMode::Off, ..quick(1) }).unwrap();
    assert!(off.logs[0].mean_u.is_none());
    let cached = TrainConfig { uncertainty_cache: true, ..quick(2) };
    let a = distill_incremental(&teacher, &data, &cached).unwrap();
    let b = distill_incremental(&teacher, &data, &cached).unwrap();
    assert_eq!(a.student.to_bytes(), b.student.to_bytes());
}

#[test]
fn distillation_preconditions_are_typed() {
    let s = small_phantoms(2, 10);
    let teacher = teacher_for(&s, 1);
    let data = new_organ(&s);
    let wrong = teacher.extend_for_increment(2, 1).unwrap();
    assert!(matches!(
        distill_from(&teacher, wrong, &data, &quick(1)),
        Err(TrainError::ChannelMismatch { teacher: 3, student: 5 })
    ));
    let unfrozen = SegModel::init_random(teacher.config().clone(), 1).unwrap();
    let student = unfrozen.extend_for_increment(1, 1).unwrap();
    assert!(matches!(distill_from(&unfrozen, student, &data, &quick(1)), Err(TrainError::TeacherNotFrozen)));
    assert!(matches!(distill_incremental(&teacher, &s, &quick(1)), Err(TrainError::Invalid(_))));
    assert!(matches!(distill_incremental(&teacher, &data, &TrainConfig { lr: -1.0, ..quick(1) }), Err(TrainError::Config(_))));
}

#[test]
fn evaluation_ignores_sample_order() {
    let mut s = small_phantoms(5, 11);
    let teacher = teacher_for(&s, 2);
    let a = evaluate(&teacher, &s, &[1, 2]).unwrap();
    s.reverse();
    let b = evaluate(&teacher, &s, &[1, 2]).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert!(evaluate(&teacher, &s, &[3]).is_err());
}
