//! End-to-end training: the expected-utility loss and its gradients.
//!
//! The loss for one pixel compares two expected-utility vectors over the
//! configured act list: the one induced by the predicted mass function m
//! (through its pignistic probabilities) and the one induced by the
//! *labeling* mass function m_l, which distributes the ground-truth label
//! set A\* uniformly over its members:
//!
//! L(m, m_l) = Σ_A [E_{m_l}(f_A) − E_m(f_A)]²
//!
//! Its gradient w.r.t. the singleton masses treats m(Ω) as the dependent
//! quantity 1 − Σ_k m({ω_k}), so ∂BetP(ω_j)/∂m({ω_k}) = δ_kj − 1/M. The
//! resulting M-vector is fed into the evidential layer's backward pass
//! (with zero direct Ω gradient) and on through the backbone.
//!
//! Training is plain mini-batch SGD (optional momentum 0.9) over every
//! parameter; the batch loss is the mean over scored pixels, so learning
//! rates are resolution-independent. Pixels whose ground truth is
//! [`PixelLabel::Novel`] are skipped. Runs are bitwise reproducible per
//! seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::collections::BTreeMap;

use crate::belief::{pignistic, MassVector};
use crate::data::{SegDataset, SegSample};
use crate::frame::PixelLabel;
use crate::model::{Model, ModelTrace};
use crate::tensor::Tensor;
use crate::utility::{select_act, ExpectedUtilities, UtilityTable};
use crate::{ClassSet, Error, Result};

/// A ground-truth label with its precomputed labeling expected utilities.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftTarget {
    label: ClassSet,
    labeling_eu: ExpectedUtilities,
}

impl SoftTarget {
    /// Precomputes E_{m_l}(f_A) for every act. Fails if the label set is
    /// not part of the table's act list.
    pub fn new(label: ClassSet, table: &UtilityTable) -> Result<SoftTarget> {
        Ok(SoftTarget {
            label,
            labeling_eu: table.labeling_expected_utilities(label)?,
        })
    }

    pub fn label(&self) -> ClassSet {
        self.label
    }

    pub fn labeling_eu(&self) -> &ExpectedUtilities {
        &self.labeling_eu
    }
}

/// Gradient-descent flavor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Optimizer {
    Sgd,
    /// SGD with momentum 0.9.
    SgdMomentum,
}

/// Hyperparameters for [`train`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Must match the utility table the model is trained against.
    pub gamma: f64,
    pub seed: u64,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.5,
            epochs: 30,
            batch_size: 8,
            gamma: 0.8,
            seed: 0,
            optimizer: Optimizer::SgdMomentum,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "invalid learning rate {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Squared expected-utility gap summed over the act list.
pub fn loss(m: &MassVector, target: &SoftTarget, table: &UtilityTable) -> Result<f64> {
    let eu = table.expected_utilities(&pignistic(m)?)?;
    if eu.len() != target.labeling_eu.len() {
        return Err(Error::Contract(
            "target was built against a different act list".into(),
        ));
    }
    Ok(eu
        .values()
        .iter()
        .zip(target.labeling_eu.values())
        .map(|(em, eml)| (eml - em) * (eml - em))
        .sum())
}

/// ∂L/∂m({ω_k}) for k = 1..M, with m(Ω) the dependent mass.
///
/// Chain: ∂E_m(f_A)/∂m({ω_k}) = Σ_j ũ_{A,j}·(δ_kj − 1/M), so each act
/// contributes −2·gap_A·(ũ_{A,k} − mean_j ũ_{A,j}).
pub fn loss_grad_masses(
    m: &MassVector,
    target: &SoftTarget,
    table: &UtilityTable,
) -> Result<Vec<f64>> {
    let classes = m.class_count();
    let eu = table.expected_utilities(&pignistic(m)?)?;
    if eu.len() != target.labeling_eu.len() {
        return Err(Error::Contract(
            "target was built against a different act list".into(),
        ));
    }
    let mut grad = vec![0.0; classes];
    for a in 0..eu.len() {
        let gap = target.labeling_eu.value(a) - eu.value(a);
        if gap == 0.0 {
            continue;
        }
        let row = table.extended_row(a);
        let mean: f64 = row.iter().sum::<f64>() / classes as f64;
        for k in 0..classes {
            grad[k] += -2.0 * gap * (row[k] - mean);
        }
    }
    Ok(grad)
}

/// Per-epoch training record.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean per-pixel loss over the epoch.
    pub loss: f64,
    /// Mean per-pixel soft utility of the decisions made during the epoch
    /// (computed on the fly, before each batch's parameter update).
    pub pu: f64,
}

/// Renders a training history as CSV (`epoch,loss,pu`).
pub fn history_csv(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch,loss,pu\n");
    for row in history {
        out.push_str(&format!("{},{},{}\n", row.epoch, row.loss, row.pu));
    }
    out
}

/// Looks up (or computes and caches) the target for a label set.
fn cached_target<'c>(
    cache: &'c mut BTreeMap<u64, SoftTarget>,
    label: ClassSet,
    table: &UtilityTable,
) -> Result<&'c SoftTarget> {
    if !cache.contains_key(&label.bits()) {
        cache.insert(label.bits(), SoftTarget::new(label, table)?);
    }
    Ok(&cache[&label.bits()])
}

/// Accumulated signal of one image: per-pixel mass gradients plus scalar
/// tallies for the history.
struct SampleSignal {
    grad_masses: Tensor,
    loss_sum: f64,
    utility_sum: f64,
    pixels: usize,
}

/// Forward-evaluates one sample and assembles the loss gradients w.r.t.
/// every pixel's normalized masses. Returns `None` for the gradient if the
/// sample contains no scored pixels.
fn sample_signal(
    model: &Model,
    sample: &SegSample,
    table: &UtilityTable,
    cache: &mut BTreeMap<u64, SoftTarget>,
) -> Result<(SampleSignal, ModelTrace)> {
    let classes = model.frame().class_count();
    let width = classes + 1;
    let (masses, trace) = model.forward(&sample.image)?;
    let (h, w, _) = masses.dims3()?;
    let mut grad_masses = Tensor::zeros(&[h, w, width])?;
    let mut loss_sum = 0.0;
    let mut utility_sum = 0.0;
    let mut pixels = 0;
    for px in 0..h * w {
        let label = match sample.labels[px] {
            PixelLabel::Known(set) => set,
            PixelLabel::Novel(_) => continue,
        };
        let target = cached_target(cache, label, table)?;
        let mass = MassVector::new(
            masses.data()[px * width..px * width + classes].to_vec(),
            masses.data()[px * width + classes],
        )?;
        loss_sum += loss(&mass, target, table)?;
        let grad = loss_grad_masses(&mass, target, table)?;
        grad_masses.data_mut()[px * width..px * width + classes].copy_from_slice(&grad);
        // Ω channel carries no direct loss gradient under the dependent-Ω
        // convention; the normalization backward supplies the coupling.

        let eu = table.expected_utilities(&pignistic(&mass)?)?;
        let (act_idx, _) = select_act(&eu, table.acts())?;
        utility_sum += table.soft_for_label(act_idx, label)?;
        pixels += 1;
    }
    Ok((
        SampleSignal {
            grad_masses,
            loss_sum,
            utility_sum,
            pixels,
        },
        trace,
    ))
}

/// Mini-batch SGD over all backbone and evidential-layer parameters.
///
/// Returns the per-epoch history; the model is updated in place.
pub fn train(
    model: &mut Model,
    dataset: &SegDataset,
    table: &UtilityTable,
    cfg: &TrainConfig,
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    if (cfg.gamma - table.gamma()).abs() > 1e-12 {
        return Err(Error::Contract(format!(
            "config γ={} does not match the utility table's γ={}",
            cfg.gamma,
            table.gamma()
        )));
    }
    if table.class_count() != model.frame().class_count() {
        return Err(Error::Contract(
            "utility table classes do not match the model frame".into(),
        ));
    }
    if dataset.train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }

    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut cache: BTreeMap<u64, SoftTarget> = BTreeMap::new();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut velocity = vec![0.0; model.param_count()];
    let mut indices: Vec<usize> = dataset.train.clone();

    for epoch in 0..cfg.epochs {
        // Fisher-Yates reshuffle per epoch.
        for i in (1..indices.len()).rev() {
            let j = rng.random_range(0..=i);
            indices.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut epoch_utility = 0.0;
        let mut epoch_pixels = 0usize;
        for (batch, chunk) in indices.chunks(cfg.batch_size).enumerate() {
            let mut flat = vec![0.0; model.param_count()];
            let mut batch_pixels = 0usize;
            let fail = |msg: String| Error::Train { epoch, batch, msg };
            for &i in chunk {
                let (signal, trace) =
                    sample_signal(model, &dataset.samples[i], table, &mut cache)
                        .map_err(|e| fail(e.to_string()))?;
                if signal.pixels == 0 {
                    continue;
                }
                if !signal.loss_sum.is_finite() {
                    return Err(fail(format!(
                        "non-finite loss {} on sample {i}",
                        signal.loss_sum
                    )));
                }
                let grads = model
                    .backward(&trace, &signal.grad_masses)
                    .map_err(|e| fail(e.to_string()))?;
                let sample_flat = model.flatten_grads(&grads).map_err(|e| fail(e.to_string()))?;
                for (acc, g) in flat.iter_mut().zip(&sample_flat) {
                    *acc += g;
                }
                epoch_loss += signal.loss_sum;
                epoch_utility += signal.utility_sum;
                batch_pixels += signal.pixels;
            }
            if batch_pixels == 0 {
                continue;
            }
            epoch_pixels += batch_pixels;
            if flat.iter().any(|g| !g.is_finite()) {
                return Err(fail("non-finite gradients".into()));
            }
            let scale = 1.0 / batch_pixels as f64;
            let mut params = model.flatten_params();
            match cfg.optimizer {
                Optimizer::Sgd => {
                    for (p, g) in params.iter_mut().zip(&flat) {
                        *p -= cfg.learning_rate * g * scale;
                    }
                }
                Optimizer::SgdMomentum => {
                    for ((p, v), g) in params.iter_mut().zip(&mut velocity).zip(&flat) {
                        *v = 0.9 * *v - cfg.learning_rate * g * scale;
                        *p += *v;
                    }
                }
            }
            model.set_params(&params).map_err(|e| fail(e.to_string()))?;
        }
        if epoch_pixels == 0 {
            return Err(Error::Train {
                epoch,
                batch: 0,
                msg: "no scored pixels in the training split".into(),
            });
        }
        let stats = EpochStats {
            epoch,
            loss: epoch_loss / epoch_pixels as f64,
            pu: epoch_utility / epoch_pixels as f64,
        };
        if !stats.loss.is_finite() {
            return Err(Error::Train {
                epoch,
                batch: 0,
                msg: format!("non-finite epoch loss {}", stats.loss),
            });
        }
        history.push(stats);
    }
    Ok(history)
}

/// Mean per-pixel loss of one sample under the current parameters.
fn sample_loss(
    model: &Model,
    sample: &SegSample,
    table: &UtilityTable,
    cache: &mut BTreeMap<u64, SoftTarget>,
) -> Result<f64> {
    let (signal, _) = sample_signal(model, sample, table, cache)?;
    if signal.pixels == 0 {
        return Err(Error::Contract(
            "gradient check needs at least one scored pixel".into(),
        ));
    }
    Ok(signal.loss_sum / signal.pixels as f64)
}

/// Outcome of [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Number of parameters compared.
    pub checked: usize,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    /// Flat index of the worst parameter.
    pub worst_param: usize,
    /// How many times the input was jittered to move off ReLU kinks or
    /// pooling ties before measuring.
    pub jitter_rounds: usize,
}

/// Central-difference validation of the full backward pass on one sample.
///
/// Compares analytic gradients against central differences for a
/// stratified subsample of at least `min_params` parameters drawn from
/// every parameter group (each layer's kernel and bias, the skip
/// projection, prototypes, η, ξ, δ). Inputs sitting numerically on a ReLU
/// kink or a pooling tie are nudged by a tiny deterministic jitter first,
/// since the loss is not differentiable there.
pub fn grad_check(
    model: &Model,
    sample: &SegSample,
    table: &UtilityTable,
    min_params: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut cache = BTreeMap::new();

    // Move off non-differentiable points if needed. The margin must stay
    // clear of the pre-activation shift a ±1e-5 parameter probe can cause
    // (bounded by h × fan-in × max input, well under 1e-3 here).
    let mut sample = sample.clone();
    let mut jitter_rounds = 0;
    loop {
        let (_, trace) = model.forward(&sample.image)?;
        if model.kink_margin(&trace) > 1e-3 || jitter_rounds >= 8 {
            break;
        }
        jitter_rounds += 1;
        for v in sample.image.data_mut() {
            *v += rng.random_range(0.01..0.03);
        }
    }

    // Analytic gradients, assembled exactly as the training loop does.
    let (signal, trace) = sample_signal(model, &sample, table, &mut cache)?;
    if signal.pixels == 0 {
        return Err(Error::Contract(
            "gradient check needs at least one scored pixel".into(),
        ));
    }
    let grads = model.backward(&trace, &signal.grad_masses)?;
    let mut flat = model.flatten_grads(&grads)?;
    let scale = 1.0 / signal.pixels as f64;
    for g in &mut flat {
        *g *= scale;
    }

    // Stratified index selection: each parameter group (small ones like η
    // or the biases included) contributes picks, then uniform draws top up
    // the quota.
    let groups = param_groups(model);
    let total = model.param_count();
    let per_group = min_params.div_ceil(groups.len());
    let mut picks: std::collections::BTreeSet<usize> = std::collections::BTreeSet::new();
    for &(start, len) in &groups {
        if len <= per_group {
            picks.extend(start..start + len);
        } else {
            for _ in 0..per_group {
                picks.insert(start + rng.random_range(0..len));
            }
        }
    }
    let quota = min_params.min(total);
    while picks.len() < quota {
        picks.insert(rng.random_range(0..total));
    }
    let picks: Vec<usize> = picks.into_iter().collect();

    let params = model.flatten_params();
    let h = 1e-5;
    let mut max_rel = 0.0f64;
    let mut sum_rel = 0.0f64;
    let mut worst = 0;
    for &k in &picks {
        let mut work = model.clone();
        let mut p = params.clone();
        p[k] = params[k] + h;
        work.set_params(&p)?;
        let up = sample_loss(&work, &sample, table, &mut cache)?;
        p[k] = params[k] - h;
        work.set_params(&p)?;
        let down = sample_loss(&work, &sample, table, &mut cache)?;
        let fd = (up - down) / (2.0 * h);
        let rel = (flat[k] - fd).abs() / flat[k].abs().max(fd.abs()).max(1e-3);
        if rel > max_rel {
            max_rel = rel;
            worst = k;
        }
        sum_rel += rel;
    }
    Ok(GradCheckReport {
        checked: picks.len(),
        max_rel_error: max_rel,
        mean_rel_error: sum_rel / picks.len().max(1) as f64,
        worst_param: worst,
        jitter_rounds,
    })
}

/// (start, length) of each parameter group in the flat vector.
fn param_groups(model: &Model) -> Vec<(usize, usize)> {
    use crate::backbone::Layer;
    let mut groups = Vec::new();
    let mut pos = 0;
    let mut push = |pos: &mut usize, len: usize| {
        if len > 0 {
            groups.push((*pos, len));
        }
        *pos += len;
    };
    for layer in &model.backbone().layers {
        match layer {
            Layer::Conv(s) | Layer::Deconv { spec: s, .. } => {
                push(&mut pos, s.kernel.len());
                push(&mut pos, s.bias.len());
            }
            Layer::Pool(_) => {}
        }
    }
    if let Some(skip) = &model.backbone().skip {
        push(&mut pos, skip.proj.len());
    }
    let bank = model.bank();
    push(&mut pos, bank.prototypes().len());
    push(&mut pos, bank.eta().len());
    push(&mut pos, bank.xi().len());
    push(&mut pos, bank.delta().len());
    groups
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ArchDesc;
    use crate::data::{gen_synthetic, SynthConfig};
    use crate::ds_layer::{ds_backward, ds_forward, PrototypeBank};
    use crate::frame::ActList;
    use crate::Frame;
    use rand::{Rng, SeedableRng};

    fn two_class_table(gamma: f64) -> (Frame, UtilityTable) {
        let frame = Frame::new(vec!["a", "b"]).unwrap();
        let acts = ActList::singletons_and_omega(&frame);
        let table = UtilityTable::identity(&frame, acts, gamma).unwrap();
        (frame, table)
    }

    /// Central difference of the loss in the constrained parameterization:
    /// bumping m({ω_k}) takes the offset out of m(Ω).
    fn fd_loss_grad(m: &MassVector, target: &SoftTarget, table: &UtilityTable) -> Vec<f64> {
        let h = 1e-6;
        let classes = m.class_count();
        (0..classes)
            .map(|k| {
                let eval = |delta: f64| {
                    let mut singles = m.singletons().to_vec();
                    singles[k] += delta;
                    let shifted =
                        MassVector::new(singles, m.omega_mass() - delta).unwrap();
                    loss(&shifted, target, table).unwrap()
                };
                (eval(h) - eval(-h)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn worked_two_class_loss_and_gradient() {
        // Vacuous mass, target {ω1}, γ=0.8: expected-utility vectors are
        // (0.5, 0.5, 0.8) for m and (1, 0, 0.8) for the labeling mass, so
        // the loss is 0.25 + 0.25 + 0 = 0.5.
        let (frame, table) = two_class_table(0.8);
        let target = SoftTarget::new(frame.singleton(0).unwrap(), &table).unwrap();
        let m = MassVector::vacuous(2);
        assert!((loss(&m, &target, &table).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(target.labeling_eu().values(), &[1.0, 0.0, 0.8]);

        // Hand evaluation of the act-sum: the two singleton acts each
        // contribute ∓0.5, the Ω act nothing, giving (−1, 1).
        let grad = loss_grad_masses(&m, &target, &table).unwrap();
        assert!((grad[0] - -1.0).abs() < 1e-12);
        assert!((grad[1] - 1.0).abs() < 1e-12);

        // Central differences need room on both sides, so probe at an
        // interior mass rather than the vacuous boundary point.
        let interior = MassVector::new(vec![0.2, 0.1], 0.7).unwrap();
        let grad = loss_grad_masses(&interior, &target, &table).unwrap();
        let fd = fd_loss_grad(&interior, &target, &table);
        for (a, f) in grad.iter().zip(&fd) {
            assert!((a - f).abs() < 1e-8);
        }
    }

    #[test]
    fn matching_mass_has_zero_loss_and_gradient() {
        let (frame, table) = two_class_table(0.8);
        let target = SoftTarget::new(frame.singleton(1).unwrap(), &table).unwrap();
        // Point mass on ω2 reproduces the labeling expected utilities.
        let m = MassVector::new(vec![0.0, 1.0], 0.0).unwrap();
        assert!(loss(&m, &target, &table).unwrap() < 1e-15);
        let grad = loss_grad_masses(&m, &target, &table).unwrap();
        assert!(grad.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn gradient_matches_finite_differences_on_random_instances() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        for _ in 0..50 {
            let class_count = rng.random_range(2..=4);
            let names: Vec<String> = (0..class_count).map(|i| format!("c{i}")).collect();
            let frame = Frame::new(names).unwrap();
            let mut extras = vec![frame.omega()];
            if class_count >= 3 {
                extras.push(ClassSet::from_indices(&[0, 1]));
                extras.push(ClassSet::from_indices(&[1, 2]));
            }
            let acts = ActList::build(&frame, &extras).unwrap();
            let gamma = rng.random_range(0.55..0.95);
            let table = UtilityTable::identity(&frame, acts, gamma).unwrap();

            // Random interior mass (Ω kept away from 0 so the constrained
            // finite-difference probe stays valid).
            let mut singles: Vec<f64> = (0..class_count).map(|_| rng.random_range(0.0..1.0)).collect();
            let omega = rng.random_range(0.2..1.0);
            let total: f64 = singles.iter().sum::<f64>() + omega;
            singles.iter_mut().for_each(|v| *v /= total);
            let m = MassVector::new(singles, omega / total).unwrap();

            let acts_len = table.acts().len();
            let label_pos = rng.random_range(0..acts_len);
            let label = table.acts().act(label_pos);
            let target = SoftTarget::new(label, &table).unwrap();

            let grad = loss_grad_masses(&m, &target, &table).unwrap();
            let fd = fd_loss_grad(&m, &target, &table);
            for (a, f) in grad.iter().zip(&fd) {
                let rel = (a - f).abs() / a.abs().max(f.abs()).max(1e-6);
                assert!(rel < 1e-6, "analytic {a} vs fd {f}");
            }
        }
    }

    #[test]
    fn loss_is_independent_of_act_list_input_order() {
        // The act list canonicalizes its order, so differently-ordered
        // inputs produce identical tables and losses.
        let frame = Frame::new(vec!["a", "b", "c"]).unwrap();
        let pair = ClassSet::from_indices(&[0, 2]);
        let acts1 = ActList::build(&frame, &[frame.omega(), pair]).unwrap();
        let acts2 = ActList::build(&frame, &[pair, frame.omega()]).unwrap();
        let t1 = UtilityTable::identity(&frame, acts1, 0.7).unwrap();
        let t2 = UtilityTable::identity(&frame, acts2, 0.7).unwrap();
        let m = MassVector::new(vec![0.3, 0.2, 0.1], 0.4).unwrap();
        let target1 = SoftTarget::new(pair, &t1).unwrap();
        let target2 = SoftTarget::new(pair, &t2).unwrap();
        assert_eq!(
            loss(&m, &target1, &t1).unwrap(),
            loss(&m, &target2, &t2).unwrap()
        );
    }

    #[test]
    fn act_list_mismatch_is_rejected() {
        // A target built against a table with an extra pair act cannot be
        // evaluated against the singletons-only table.
        let frame = Frame::new(vec!["a", "b", "c"]).unwrap();
        let table_small =
            UtilityTable::identity(&frame, ActList::singletons_and_omega(&frame), 0.8).unwrap();
        let pair = ClassSet::from_indices(&[0, 1]);
        let table_full =
            UtilityTable::identity(&frame, ActList::build(&frame, &[pair]).unwrap(), 0.8).unwrap();
        let target = SoftTarget::new(frame.singleton(0).unwrap(), &table_full).unwrap();
        let m = MassVector::vacuous(3);
        assert!(matches!(
            loss(&m, &target, &table_small),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn gradient_descent_on_frozen_features_reduces_the_loss() {
        // DS layer alone on three fixed feature points with singleton
        // targets: exact gradient steps must drive the loss down.
        let (frame, table) = two_class_table(0.8);
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut bank = PrototypeBank::init_random(4, 2, 2, &mut rng).unwrap();
        let features = [[0.0, 0.0], [1.0, 1.0], [1.0, 0.0]];
        let labels = [0usize, 1, 0];
        let targets: Vec<SoftTarget> = labels
            .iter()
            .map(|&j| SoftTarget::new(frame.singleton(j).unwrap(), &table).unwrap())
            .collect();

        let eval = |bank: &PrototypeBank| -> f64 {
            features
                .iter()
                .zip(&targets)
                .map(|(x, t)| {
                    let (m, _) = ds_forward(x, bank).unwrap();
                    loss(&m, t, &table).unwrap()
                })
                .sum()
        };

        let mut last = eval(&bank);
        let initial = last;
        for _ in 0..60 {
            let mut grads = crate::ds_layer::BankGrads::zeros_like(&bank);
            for (x, t) in features.iter().zip(&targets) {
                let (m, trace) = ds_forward(x, &bank).unwrap();
                let gm = loss_grad_masses(&m, t, &table).unwrap();
                let mut full = gm.clone();
                full.push(0.0);
                let (g, _) = ds_backward(&full, &trace, x, &bank).unwrap();
                for (acc, v) in grads.prototypes.iter_mut().zip(&g.prototypes) {
                    *acc += v;
                }
                for (acc, v) in grads.eta.iter_mut().zip(&g.eta) {
                    *acc += v;
                }
                for (acc, v) in grads.xi.iter_mut().zip(&g.xi) {
                    *acc += v;
                }
                for (acc, v) in grads.delta.iter_mut().zip(&g.delta) {
                    *acc += v;
                }
            }
            let lr = 0.05;
            for (p, g) in bank.prototypes_mut().iter_mut().zip(&grads.prototypes) {
                *p -= lr * g;
            }
            for (p, g) in bank.eta_mut().iter_mut().zip(&grads.eta) {
                *p -= lr * g;
            }
            for (p, g) in bank.xi_mut().iter_mut().zip(&grads.xi) {
                *p -= lr * g;
            }
            for (p, g) in bank.delta_mut().iter_mut().zip(&grads.delta) {
                *p -= lr * g;
            }
            let now = eval(&bank);
            assert!(now <= last + 1e-9, "loss rose from {last} to {now}");
            last = now;
        }
        assert!(last < 0.5 * initial, "loss {initial} only fell to {last}");
    }

    /// A small dataset + arch for fast end-to-end training tests:
    /// 16×16 scenes, conv(5,8)+pool(2)+deconv(6,×2).
    fn tiny_setup(
        boundary_width: usize,
        count: usize,
    ) -> (Frame, SegDataset, Model, UtilityTable) {
        let frame = Frame::new(vec!["bg", "fg"]).unwrap();
        let cfg = SynthConfig {
            count,
            height: 16,
            width: 16,
            min_radius: 2,
            max_radius: 5,
            boundary_width,
            train_fraction: 1.0,
            ..SynthConfig::default()
        };
        let dataset = gen_synthetic(&frame, &cfg).unwrap();
        let arch = ArchDesc {
            layers: vec![
                crate::backbone::LayerDesc::Conv { kernel: 5, channels: 8, stride: 1, relu: true },
                crate::backbone::LayerDesc::Pool { window: 2 },
                crate::backbone::LayerDesc::Deconv { kernel: 6, channels: 8, factor: 2, relu: false },
            ],
            skip: None,
        };
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let model = Model::init(frame.clone(), &arch, 3, 6, &mut rng).unwrap();
        let acts = ActList::build(&frame, &[frame.omega()]).unwrap();
        let table = UtilityTable::identity(&frame, acts, 0.8).unwrap();
        (frame, dataset, model, table)
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let (_, dataset, mut model, table) = tiny_setup(2, 6);
        let before = model.flatten_params();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 3,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let history = train(&mut model, &dataset, &table, &cfg).unwrap();
        assert_eq!(model.flatten_params(), before);
        assert_eq!(history.len(), 3);
        for row in &history[1..] {
            assert!((row.loss - history[0].loss).abs() < 1e-9);
            assert!((row.pu - history[0].pu).abs() < 1e-9);
        }
    }

    #[test]
    fn loss_decreases_over_the_first_epochs() {
        let (_, dataset, mut model, table) = tiny_setup(2, 16);
        let cfg = TrainConfig {
            learning_rate: 0.5,
            epochs: 5,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let history = train(&mut model, &dataset, &table, &cfg).unwrap();
        assert!(
            history[4].loss < history[0].loss,
            "loss went {} → {}",
            history[0].loss,
            history[4].loss
        );
    }

    #[test]
    fn training_is_bitwise_reproducible() {
        let cfg = TrainConfig {
            learning_rate: 0.4,
            epochs: 2,
            batch_size: 4,
            seed: 9,
            ..TrainConfig::default()
        };
        let run = || {
            let (_, dataset, mut model, table) = tiny_setup(2, 8);
            let history = train(&mut model, &dataset, &table, &cfg).unwrap();
            (model.flatten_params(), history)
        };
        let (params_a, hist_a) = run();
        let (params_b, hist_b) = run();
        for (a, b) in params_a.iter().zip(&params_b) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(hist_a, hist_b);
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostics() {
        // A NaN pixel in one training image must surface as a training
        // abort carrying epoch/batch context, not propagate silently.
        let (_, mut dataset, mut model, table) = tiny_setup(2, 6);
        dataset.samples[3].image.data_mut()[10] = f64::NAN;
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            ..TrainConfig::default()
        };
        match train(&mut model, &dataset, &table, &cfg) {
            Err(Error::Train { epoch, .. }) => assert_eq!(epoch, 0),
            other => panic!("expected a training abort, got {other:?}"),
        }
    }

    #[test]
    fn extreme_learning_rates_saturate_rather_than_overflow() {
        // Huge steps push prototypes far from every feature vector; the
        // similarity kernel then underflows to zero and the layer emits
        // vacuous masses instead of NaN, so training survives (uselessly).
        let (_, dataset, mut model, table) = tiny_setup(2, 6);
        let cfg = TrainConfig {
            learning_rate: 1e14,
            epochs: 3,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let history = train(&mut model, &dataset, &table, &cfg).unwrap();
        assert!(history.iter().all(|row| row.loss.is_finite()));
    }

    #[test]
    fn gamma_mismatch_is_rejected() {
        let (_, dataset, mut model, table) = tiny_setup(2, 4);
        let cfg = TrainConfig {
            gamma: 0.6, // table was built for 0.8
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&mut model, &dataset, &table, &cfg),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn grad_check_passes_on_the_full_graph() {
        // Micro architecture on an 8×8 synthetic crop.
        let frame = Frame::new(vec!["bg", "fg"]).unwrap();
        let cfg = SynthConfig {
            count: 1,
            height: 8,
            width: 8,
            min_radius: 2,
            max_radius: 3,
            boundary_width: 1,
            train_fraction: 1.0,
            ..SynthConfig::default()
        };
        let dataset = gen_synthetic(&frame, &cfg).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let model = Model::init(frame.clone(), &ArchDesc::micro(), 3, 5, &mut rng).unwrap();
        let acts = ActList::build(&frame, &[frame.omega()]).unwrap();
        let table = UtilityTable::identity(&frame, acts, 0.8).unwrap();

        let report = grad_check(&model, &dataset.samples[0], &table, 200, 11).unwrap();
        assert!(report.checked >= 200, "only {} params checked", report.checked);
        assert!(
            report.max_rel_error < 1e-4,
            "max relative error {} at param {}",
            report.max_rel_error,
            report.worst_param
        );
    }

    #[test]
    fn grad_check_jitters_off_relu_kinks() {
        // An all-zero image puts every ReLU exactly at its kink (zero
        // bias); the jitter loop must engage and the check must still pass.
        let frame = Frame::new(vec!["bg", "fg"]).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let model = Model::init(frame.clone(), &ArchDesc::micro(), 3, 4, &mut rng).unwrap();
        let acts = ActList::build(&frame, &[frame.omega()]).unwrap();
        let table = UtilityTable::identity(&frame, acts, 0.8).unwrap();
        let sample = SegSample {
            image: Tensor::zeros(&[8, 8, 3]).unwrap(),
            labels: vec![PixelLabel::Known(frame.singleton(0).unwrap()); 64],
        };
        let report = grad_check(&model, &sample, &table, 200, 5).unwrap();
        assert!(report.jitter_rounds > 0, "jitter should have engaged");
        assert!(
            report.max_rel_error < 1e-4,
            "max relative error {}",
            report.max_rel_error
        );
    }

    #[test]
    fn history_csv_is_well_formed() {
        let history = vec![
            EpochStats { epoch: 0, loss: 0.5, pu: 0.25 },
            EpochStats { epoch: 1, loss: 0.125, pu: 0.75 },
        ];
        let csv = history_csv(&history);
        assert_eq!(csv, "epoch,loss,pu\n0,0.5,0.25\n1,0.125,0.75\n");
    }
}
