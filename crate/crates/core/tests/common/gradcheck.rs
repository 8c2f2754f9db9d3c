//! Central finite differences against the tape gradients.

use mgreid::am_msa::Rmp;
use mgreid::graph::{Graph, Mat};
use mgreid::image_encoder::MaskMode;
use mgreid::nn::Ctx;
use mgreid::objectives::{loss_cmp, loss_i2tce, loss_id, loss_imp, loss_mask, MemoryRole};
use mgreid::params::{normal_mat, Group, ParamStore};
use mgreid::text_encoder::GranularitySet;
use mgreid::trainer::{stage1_objective, stage2_objective, Batch, TrainConfig};
use rand::Rng;

use super::*;

type LossFn<'a> = dyn Fn(&mut Graph, mgreid::graph::Var) -> mgreid::graph::Var + 'a;

/// Worst relative error over a set of checks, and what received no
/// gradient although it should have.
#[derive(Debug, Default)]
pub struct GradReport {
    pub worst: f64,
    pub failures: Vec<String>,
}

impl GradReport {
    fn record(&mut self, name: &str, err: f64) {
        self.worst = self.worst.max(err);
        if err.is_nan() || err >= GRAD_TOL {
            self.failures.push(format!("{name}: relative error {err:e}"));
        }
    }

    fn merge(&mut self, other: GradReport) {
        self.worst = self.worst.max(other.worst);
        self.failures.extend(other.failures);
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Every loss against its input, including the image prototype loss at a
/// small temperature.
pub fn loss_gradients() -> GradReport {
    let mut report = GradReport::default();
    let mut r = rng(1);
    let labels = [0usize, 2, 1, 2];
    let memory = random_memory(&mut r, MemoryRole::Vpm2, 3, 5);
    let x = random_mat(&mut r, 4, 5);
    let logits = random_mat(&mut r, 4, 3);
    let mask_logits = random_mat(&mut r, 3, 8);
    let mask_labels = Mat::from_shape_fn((3, 8), |_| if r.random_bool(0.5) { 1.0 } else { 0.0 });

    let cases: Vec<(&str, Mat, Box<LossFn>)> = vec![
        ("cmp", x.clone(), Box::new(|g, v| loss_cmp(g, v, &memory, &labels).unwrap())),
        ("id", logits.clone(), Box::new(|g, v| loss_id(g, v, &labels).unwrap())),
        ("imp", x.clone(), Box::new(|g, v| loss_imp(g, v, &memory, &labels, 0.5).unwrap())),
        ("i2tce", x.clone(), Box::new(|g, v| loss_i2tce(g, v, &memory, &labels, 0.1).unwrap())),
        ("bce", mask_logits.clone(), Box::new(|g, v| loss_mask(g, v, &mask_labels).unwrap().0)),
        ("dice", mask_logits.clone(), Box::new(|g, v| loss_mask(g, v, &mask_labels).unwrap().1)),
    ];
    for (name, input, build) in &cases {
        report.record(name, input_grad_error(input, build.as_ref()));
    }

    let mut r = rng(2);
    let memory = random_memory(&mut r, MemoryRole::Vpm2, 4, 6);
    let x = random_mat(&mut r, 3, 6);
    report.record("imp at tau 0.01", input_grad_error(&x, &|g, v| loss_imp(g, v, &memory, &[1, 3, 0], 0.01).unwrap()));
    report
}

/// The mask predictor's parameters and its three inputs.
pub fn predictor_gradients() -> GradReport {
    let mut report = GradReport::default();
    let mut r = rng(3);
    let (d, n, batch) = (16, 8, 2);
    let mut store = ParamStore::new();
    let rmp = Rmp::new(&mut store, "rmp", d, n, 2, &mut r);
    *store.value_mut(rmp.fc2.w) = normal_mat(&mut r, d, n, 0.3);
    let locals = random_mat(&mut r, 3 * batch, d);
    let patches = random_mat(&mut r, batch * n, d);
    let prev = random_mat(&mut r, 3 * batch, n);
    let readout_q = random_mat(&mut r, d, 1);
    let readout_m = random_mat(&mut r, n, 1);

    let build = |g: &mut Graph, ctx: &Ctx, l: Mat, p: Mat, m: Mat| {
        let (l, p, m) = (g.input(l, true), g.input(p, true), g.input(m, true));
        let (refined, logits) = rmp.forward(g, ctx, l, p, m, batch);
        let rq = g.constant(readout_q.clone());
        let rm = g.constant(readout_m.clone());
        let a = g.matmul(refined, rq);
        let b = g.matmul(logits, rm);
        let b = g.sigmoid(b);
        let (a, b) = (g.mean_all(a), g.mean_all(b));
        (g.sum(&[a, b]), [l, p, m])
    };

    let checks = check_params(&mut store, &|grp| grp == Group::Rmp, 12, 4, &|g, ctx| {
        build(g, ctx, locals.clone(), patches.clone(), prev.clone()).0
    });
    for c in &checks {
        report.record(&c.name, c.rel_error);
        // key biases shift every score of a row equally, so softmax cancels them
        if !c.name.ends_with(".k.b") && c.analytic_norm <= GRAD_FLOOR {
            report.failures.push(format!("{} received no gradient", c.name));
        }
    }

    let never = |_: Group| false;
    let ctx = Ctx::new(&store, &never);
    let mut g = Graph::new();
    let (loss, inputs) = build(&mut g, &ctx, locals.clone(), patches.clone(), prev.clone());
    let grads = g.backward(loss);
    let originals = [&locals, &patches, &prev];
    for (k, name) in ["locals", "patches", "prev_logits"].iter().enumerate() {
        let numeric = numeric_input_grad(originals[k], &|m| {
            let mut args = [locals.clone(), patches.clone(), prev.clone()];
            args[k] = m.clone();
            let mut g = Graph::new();
            let [l, p, m] = args;
            let loss = build(&mut g, &ctx, l, p, m).0;
            g.scalar(loss)
        });
        match grads.wrt(inputs[k]) {
            Some(analytic) => report.record(name, rel_error(&flat(analytic), &flat(&numeric))),
            None => report.failures.push(format!("no gradient for {name}")),
        }
    }
    report
}

/// Prompt embeddings through the frozen text encoder and the contrastive
/// loss; identities outside the batch get exactly nothing.
pub fn prompt_gradients() -> GradReport {
    let mut report = GradReport::default();
    let mut r = rng(5);
    let model = micro_model(3, GranularitySet::all());
    let memory = random_memory(&mut r, MemoryRole::Vpm1, 3, 8);
    let mut store = model.prompts.store.clone();
    let checks = check_params(&mut store, &|grp| grp == Group::Prompts, 6, 6, &|g, ctx| {
        stage1_objective(g, &model, &memory, &[0, 2], ctx).unwrap()
    });
    for c in &checks {
        report.record(&c.name, c.rel_error);
        // prompts of identity 1 are not in the batch
        let used = !c.name.starts_with("prompt.1.");
        if (c.analytic_norm > 0.0) != used {
            report.failures.push(format!("{}: gradient norm {:e}", c.name, c.analytic_norm));
        }
    }
    report
}

/// The whole stage-2 objective on a two-sample micro model; every
/// trainable group must receive gradient.
pub fn stage2_gradients(mode: MaskMode) -> GradReport {
    let mut report = GradReport::default();
    let mut r = rng(7);
    let mut model = micro_model(2, GranularitySet::all());
    activate_predictors(&mut model, &mut r, 0.02);
    model.vpm2 = Some(random_memory(&mut r, MemoryRole::Vpm2, 2, 8).with_momentum(0.2).unwrap());
    model.tpm = Some(random_memory(&mut r, MemoryRole::Tpm, 2, 8));
    let n = model.image.num_patches();
    let batch = Batch {
        images: vec![random_image(&mut r, 32, 16), random_image(&mut r, 32, 16)],
        labels: vec![0, 1],
        masks: vec![random_label_matrix(&mut r, n), random_label_matrix(&mut r, n)],
    };
    let config = TrainConfig { mask_source: mode, ..TrainConfig::default() };
    let mut store = model.image.store.clone();
    let checks = check_params(&mut store, &stage2_groups, 4, 8, &|g, ctx| {
        stage2_objective(g, &model, ctx, &batch, &config).unwrap().total
    });
    let mut groups_seen = Vec::new();
    for c in &checks {
        report.record(&format!("{mode}: {}", c.name), c.rel_error);
        if c.analytic_norm > GRAD_FLOOR && !groups_seen.contains(&c.group) {
            groups_seen.push(c.group);
        }
    }
    for grp in [Group::Encoder, Group::VisualTokens, Group::BnNeck, Group::Classifier, Group::Rmp] {
        if !groups_seen.contains(&grp) {
            report.failures.push(format!("{mode}: {grp:?} received no gradient"));
        }
    }
    report
}

/// Every check above.
pub fn full_suite() -> GradReport {
    let mut report = loss_gradients();
    report.merge(predictor_gradients());
    report.merge(prompt_gradients());
    report.merge(stage2_gradients(MaskMode::Predicted));
    report.merge(stage2_gradients(MaskMode::External));
    report
}
