//! Acceptance checks 1 to 11. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. `SGTM_ACCEPT=1,2,10` runs a subset.
//!
//! Criteria 4 to 10 share a lazily trained lab of small models on a
//! synthetic two-domain corpus; every run is trained at most once.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::process::ExitCode;
use std::rc::Rc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sgtm::data::{assign_labels, Corpus, DataSpec, Dataset, Domain, LabelNoiseSpec};
use sgtm::eval::{
    calibrate, collect_logits, compute_penalty, fit_power_law, fit_scaling, grad_norm_study, leakage,
    CalibrationConfig, CalibrationResult, EvalLosses, GradNormSummary, LeakageReport,
};
use sgtm::interventions::{BatchLabel, InterventionPlan};
use sgtm::model::{lm_loss, loss_and_grads, ForwardOptions, ModelConfig, ParamSet, TokenBatch};
use sgtm::partition::{ablate, build_designation, ParamDesignation, PartitionSpec, Tag, Variant};
use sgtm::train::{
    finetune_attack, run_rmu, train, AdamWConfig, AttackReport, FinetunePlan, OptimizerState, RmuPlan, RunRecord,
    TrainMethod, TrainPlan,
};

type Outcome = Result<String, String>;

/// Training data grows with parameter count, as in compute-matched scaling:
/// 300k tokens per domain at the smallest size.
fn lab_data(d_model: usize) -> DataSpec {
    let scale = model(d_model).n_params() as f64 / model(SIZES[0].1).n_params() as f64;
    DataSpec {
        vocab_size: 64,
        overlap_fraction: 0.25,
        branching: 4,
        zipf: 1.0,
        stop_prob: 0.03,
        context_len: 64,
        train_tokens_per_domain: (300_000.0 * scale).round() as usize,
        test_tokens_per_domain: 4_000,
    }
}

fn model(d_model: usize) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model,
        d_mlp: 4 * d_model,
        n_heads: 8,
        vocab_size: 64,
        context_len: 64,
        tie_embeddings: true,
    }
}

/// Fixed forget capacity at every size: one head and 16 MLP units.
fn partition() -> PartitionSpec {
    PartitionSpec::new(1, 16, Variant::Sgtm)
}

const SIZES: [(&str, usize); 3] = [("A", 32), ("B", 48), ("C", 64)];
const RATES: [f64; 4] = [0.0, 0.01, 0.05, 0.2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Kind {
    Sgtm,
    FilterWeak,
    FilterNone,
}

struct Run {
    config: ModelConfig,
    record: RunRecord,
    /// Final parameters before ablation.
    params: ParamSet<f32>,
    /// What gets evaluated: ablated for SGTM, `params` otherwise.
    evaluated: ParamSet<f32>,
    desig: Option<ParamDesignation>,
    checkpoints: Vec<(usize, ParamSet<f32>)>,
}

struct Lab {
    corpora: RefCell<BTreeMap<usize, Rc<Corpus>>>,
    runs: RefCell<BTreeMap<(usize, Kind, u32), Rc<Run>>>,
    calibrations: RefCell<BTreeMap<(usize, Kind, u32), Rc<CalibrationResult>>>,
}

fn labels(rate: f64) -> LabelNoiseSpec {
    LabelNoiseSpec { tpr: 1.0 - rate, ..LabelNoiseSpec::default() }
}

fn key(d_model: usize, kind: Kind, rate: f64) -> (usize, Kind, u32) {
    (d_model, kind, (rate * 1e4).round() as u32)
}

impl Lab {
    fn new() -> Self {
        Lab { corpora: RefCell::default(), runs: RefCell::default(), calibrations: RefCell::default() }
    }

    /// Corpus for one model size. Larger corpora extend smaller ones and
    /// share their test sets.
    fn corpus(&self, d_model: usize) -> Rc<Corpus> {
        if let Some(c) = self.corpora.borrow().get(&d_model) {
            return c.clone();
        }
        let t = Instant::now();
        let corpus = Rc::new(Corpus::generate(&lab_data(d_model), 11).expect("lab corpus"));
        eprintln!(
            "[lab] d={d_model} corpus: {} training examples in {:.1}s",
            corpus.train.len(),
            t.elapsed().as_secs_f64()
        );
        self.corpora.borrow_mut().insert(d_model, corpus.clone());
        corpus
    }

    fn dataset(&self, d_model: usize, rate: f64) -> Dataset {
        assign_labels(&self.corpus(d_model).train, &labels(rate)).expect("labels")
    }

    fn run(&self, d_model: usize, kind: Kind, rate: f64) -> Rc<Run> {
        let k = key(d_model, kind, rate);
        if let Some(r) = self.runs.borrow().get(&k) {
            return r.clone();
        }
        let config = model(d_model);
        let method = match kind {
            Kind::Sgtm => TrainMethod::Sgtm(partition()),
            Kind::FilterWeak => TrainMethod::FilterWeak,
            Kind::FilterNone => TrainMethod::FilterNone,
        };
        let plan = TrainPlan {
            eval_every: 200,
            keep_checkpoints: kind == Kind::Sgtm,
            ..TrainPlan::new(method, 1)
        };
        let t = Instant::now();
        let corpus = self.corpus(d_model);
        let out = train(&config, &plan, &self.dataset(d_model, rate), &corpus.test, ParamSet::init(&config, 0), None)
            .expect("lab training");
        let record = out.record.into_result().expect("lab run converges");
        let desig = match kind {
            Kind::Sgtm => Some(build_designation(&config, &partition()).expect("designation")),
            _ => None,
        };
        let evaluated = match &desig {
            Some(d) => ablate(&out.params, d).expect("ablation"),
            None => out.params.clone(),
        };
        let last = record.last();
        eprintln!(
            "[lab] d={d_model} {kind:?} undiscovered={rate}: {} steps in {:.1}s, forget {:.3} retain {:.3}",
            record.steps,
            t.elapsed().as_secs_f64(),
            last.loss_forget_test,
            last.loss_retain_test
        );
        let run = Rc::new(Run { config, record, params: out.params, evaluated, desig, checkpoints: out.checkpoints });
        self.runs.borrow_mut().insert(k, run.clone());
        run
    }

    /// Logit calibration of a run's evaluated model on the test sets.
    fn calibrated(&self, d_model: usize, kind: Kind, rate: f64) -> Rc<CalibrationResult> {
        let k = key(d_model, kind, rate);
        if let Some(c) = self.calibrations.borrow().get(&k) {
            return c.clone();
        }
        let run = self.run(d_model, kind, rate);
        let cal = Rc::new(calibrate_params(&run.config, &run.evaluated, &self.corpus(d_model)));
        self.calibrations.borrow_mut().insert(k, cal.clone());
        cal
    }

    fn pool(&self, d_model: usize, domain: Domain) -> Vec<Vec<u32>> {
        self.corpus(d_model).train.iter().filter(|e| e.domain == domain).map(|e| e.tokens.clone()).collect()
    }
}

fn calibrate_params(config: &ModelConfig, params: &ParamSet<f32>, corpus: &Corpus) -> CalibrationResult {
    let f = collect_logits(config, params, &corpus.test.forget).expect("forget logits");
    let r = collect_logits(config, params, &corpus.test.retain).expect("retain logits");
    calibrate(&f, &r, &CalibrationConfig::default()).expect("calibration")
}

fn small_config() -> ModelConfig {
    ModelConfig { n_layers: 2, d_model: 16, d_mlp: 32, n_heads: 4, vocab_size: 24, context_len: 16, tie_embeddings: true }
}

fn random_batch(rng: &mut ChaCha8Rng, config: &ModelConfig, n: usize) -> TokenBatch {
    let seqs: Vec<Vec<u32>> = (0..n)
        .map(|_| {
            let len = rng.gen_range(3..=config.context_len);
            (0..len).map(|_| rng.gen_range(1..config.vocab_size as u32)).collect()
        })
        .collect();
    TokenBatch::from_sequences(&seqs).expect("batch")
}

fn gradient_exactness() -> Outcome {
    let config = small_config();
    let desig = build_designation(&config, &PartitionSpec::new(1, 8, Variant::Sgtm)).map_err(|e| e.to_string())?;
    let plan = InterventionPlan::new(desig.clone());
    let mut params = ParamSet::<f32>::init(&config, 3);
    let mut opt = OptimizerState::new(&params, Some(&desig), AdamWConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut forget_steps, mut checked) = (0, 0usize);
    while forget_steps < 100 {
        let label = *BatchLabel::ALL.choose(&mut rng).expect("labels");
        let batch = random_batch(&mut rng, &config, 4);
        let (_, g) = loss_and_grads(&config, &params, &batch, plan.forward_options(label, true)).map_err(|e| e.to_string())?;
        let g = plan.mask_gradients(g, label);
        let before = params.clone();
        opt.step(&mut params, &g, rng.gen_range(1e-3..1e-2), plan.actions(label).skip);
        if label != BatchLabel::Forget {
            continue;
        }
        forget_steps += 1;
        for i in 0..params.len() {
            for r in desig.ranges(i).iter().filter(|r| r.2 == Tag::Retain) {
                let (a, b) = (&params.get(i).value.data()[r.range()], &before.get(i).value.data()[r.range()]);
                if a.iter().zip(b).any(|(x, y)| x.to_bits() != y.to_bits()) {
                    return Err(format!("retain element of {} changed on forget step {forget_steps}", params.get(i).path));
                }
                checked += r.len();
            }
        }
    }
    Ok(format!("100 FORGET steps among random labels, {checked} retain element checks, all bit-identical"))
}

fn mask_ablation_equivalence() -> Outcome {
    let config = small_config();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0usize;
    for variant in [Variant::Sgtm, Variant::SgtmJointProjection, Variant::SgtmJointAttention] {
        let desig = build_designation(&config, &PartitionSpec::new(1, 8, variant)).map_err(|e| e.to_string())?;
        let plan = InterventionPlan::new(desig.clone());
        for seed in 0..5 {
            let params = ParamSet::<f32>::init(&config, seed);
            let ablated = ablate(&params, &desig).map_err(|e| e.to_string())?;
            let batch = random_batch(&mut rng, &config, 6);
            let masked = lm_loss(&config, &params, &batch, plan.forward_options(BatchLabel::Retain, false))
                .map_err(|e| e.to_string())?;
            let plain = lm_loss(&config, &ablated, &batch, ForwardOptions::default()).map_err(|e| e.to_string())?;
            if masked.to_bits() != plain.to_bits() {
                return Err(format!("{}: masked {masked:e} vs ablated {plain:e}", variant.name()));
            }
            worst += 1;
        }
    }
    Ok(format!("{worst} RETAIN batches over three variants, losses bit-identical"))
}

fn finite_differences() -> Outcome {
    let config = ModelConfig { n_layers: 2, d_model: 8, d_mlp: 16, n_heads: 2, vocab_size: 12, context_len: 8, tie_embeddings: true };
    let params = ParamSet::<f64>::init(&config, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let batch = random_batch(&mut rng, &config, 3);
    let (_, grads) = loss_and_grads(&config, &params, &batch, ForwardOptions::default()).map_err(|e| e.to_string())?;
    let loss = |p: &ParamSet<f64>| lm_loss(&config, p, &batch, ForwardOptions::default()).expect("loss");
    // groups: each block, then everything outside the blocks
    let group = |path: &str| path.strip_prefix("blocks.").and_then(|s| s.split('.').next()).map(str::to_string);
    let mut groups: BTreeMap<String, Vec<(usize, usize)>> = BTreeMap::new();
    for (i, p) in params.iter().enumerate() {
        let g = group(&p.path).unwrap_or_else(|| "outside".into());
        groups.entry(g).or_default().extend((0..p.value.numel()).map(|j| (i, j)));
    }
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut n = 0;
    for (name, elems) in &groups {
        for &(i, j) in elems.choose_multiple(&mut rng, 20) {
            let mut p = params.clone();
            p.get_mut(i).value.data_mut()[j] += h;
            let up = loss(&p);
            p.get_mut(i).value.data_mut()[j] -= 2.0 * h;
            let down = loss(&p);
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.get(i).data()[j];
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
            if rel >= 1e-4 {
                return Err(format!("{name}: {}[{j}] analytic {analytic:e} numeric {numeric:e}", params.get(i).path));
            }
            worst = worst.max(rel);
            n += 1;
        }
    }
    Ok(format!("{n} parameters over {} groups, worst relative error {worst:.2e}", groups.len()))
}

fn tradeoff(lab: &Lab) -> Outcome {
    let d = SIZES[0].1;
    let perfect_view = TrainMethod::FilterPerfect.view(&lab.dataset(d, 0.0));
    if perfect_view != TrainMethod::FilterWeak.view(&lab.dataset(d, 0.0)) {
        return Err("weak filtering at full recall should equal the perfect filter".into());
    }
    let sgtm = lab.calibrated(d, Kind::Sgtm, 0.01);
    let weak = lab.calibrated(d, Kind::FilterWeak, 0.01);
    let perfect = lab.calibrated(d, Kind::FilterWeak, 0.0);
    let detail = format!(
        "calibrated forget/retain: sgtm {:.3}/{:.3}, 99% filter {:.3}/{:.3}, perfect filter {:.3}/{:.3}",
        sgtm.forget_after, sgtm.retain_after, weak.forget_after, weak.retain_after, perfect.forget_after, perfect.retain_after
    );
    let checks = [
        (sgtm.forget_after - weak.forget_after >= 0.2, "forget margin over the 99% filter below 0.2"),
        ((sgtm.retain_after - weak.retain_after).abs() <= 0.3, "retain loss more than 0.3 from the 99% filter"),
        ((sgtm.forget_after - perfect.forget_after).abs() <= 0.15, "forget loss more than 0.15 from the perfect filter"),
    ];
    match checks.iter().filter(|c| !c.0).map(|c| c.1).collect::<Vec<_>>() {
        failed if failed.is_empty() => Ok(detail),
        failed => Err(format!("{}; {detail}", failed.join("; "))),
    }
}

fn label_noise(lab: &Lab) -> Outcome {
    let d = SIZES[0].1;
    let fl = |kind, rate| lab.calibrated(d, kind, rate).forget_after;
    let (s0, f0) = (fl(Kind::Sgtm, 0.0), fl(Kind::FilterWeak, 0.0));
    let mut parts = Vec::new();
    let mut ok = true;
    for rate in &RATES[1..] {
        let ds = s0 - fl(Kind::Sgtm, *rate);
        let df = f0 - fl(Kind::FilterWeak, *rate);
        ok &= ds < df;
        parts.push(format!("{}%: sgtm {ds:.3} vs filter {df:.3}", rate * 100.0));
    }
    let detail = format!("forget-loss decline from 0%: {}", parts.join(", "));
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn leakage_at(lab: &Lab, d: usize, run_kind: Kind, rate: f64) -> LeakageReport {
    let mut curve: Vec<(f64, f64)> = RATES
        .iter()
        .map(|&r| lab.run(d, Kind::FilterWeak, r))
        .chain([lab.run(d, Kind::FilterNone, 0.0)])
        .map(|run| (run.record.last().tokens_forget as f64, run.record.last().loss_forget_test))
        .collect();
    curve.sort_by(|a, b| a.0.total_cmp(&b.0));
    let run = lab.run(d, run_kind, rate);
    leakage(run.record.last().loss_forget_test, run.record.undiscovered_forget_tokens as f64, &curve).expect("leakage")
}

fn show(r: &LeakageReport) -> String {
    match r.leakage {
        Some(l) => format!("{l:.4}"),
        None => format!("in [{:.4}, {:.4}] (outside curve)", r.leakage_bounds.0, r.leakage_bounds.1),
    }
}

fn leakage_check(lab: &Lab) -> Outcome {
    // smallest and largest desk sizes, about 4x apart in parameters
    let (a, b) = (SIZES[0].1, SIZES[2].1);
    let small = leakage_at(lab, a, Kind::Sgtm, 0.2);
    let large = leakage_at(lab, b, Kind::Sgtm, 0.2);
    let filter = leakage_at(lab, a, Kind::FilterWeak, 0.2);
    let detail = format!(
        "sgtm 20% leakage: {} params {}, {} params {}; filter run {}",
        model(a).n_params(),
        show(&small),
        model(b).n_params(),
        show(&large),
        show(&filter)
    );
    let filter_ok = filter.leakage.is_some_and(|l| (l - 1.0).abs() <= 0.05);
    let ok = small.leakage_bounds.1 < 0.5 && filter_ok && large.leakage_bounds.1 <= small.leakage_bounds.0;
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn grad_norms(lab: &Lab) -> Outcome {
    let run = lab.run(SIZES[0].1, Kind::Sgtm, 0.0);
    let desig = run.desig.as_ref().expect("sgtm designation");
    let corpus = lab.corpus(SIZES[0].1);
    let test = &corpus.test;
    let examples: Vec<(Domain, Vec<u32>)> = test.forget.iter().take(100).map(|s| (Domain::Forget, s.clone()))
        .chain(test.retain.iter().take(100).map(|s| (Domain::Retain, s.clone())))
        .collect();
    let params = run.params.cast::<f64>();
    let rows = grad_norm_study(&run.config, &params, desig, &examples).map_err(|e| e.to_string())?;
    let s = GradNormSummary::from_rows(&rows);
    let forget_ratio = s.forget_params_forget_data / s.forget_params_retain_data;
    let retain_ratio = s.retain_params_retain_data / s.retain_params_forget_data;
    let detail = format!(
        "theta_forget: forget/retain data {forget_ratio:.2}x; theta_retain: retain/forget data {retain_ratio:.2}x ({} examples)",
        rows.len()
    );
    if forget_ratio >= 2.0 && retain_ratio >= 1.1 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fmt_steps(r: &AttackReport, cap: usize) -> String {
    r.steps_to_baseline.map_or(format!("> {cap}"), |s| s.to_string())
}

fn finetune_robustness(lab: &Lab) -> Outcome {
    let d = SIZES[0].1;
    let base = lab.run(d, Kind::FilterNone, 0.0);
    let sgtm = lab.run(d, Kind::Sgtm, 0.01);
    let (forget, retain) = (lab.pool(d, Domain::Forget), lab.pool(d, Domain::Retain));
    let corpus = lab.corpus(d);
    let test = &corpus.test;
    let baseline = base.record.last().loss_forget_test;
    let t = Instant::now();
    let (rmu_model, rmu_record, _) = run_rmu(&base.config, &base.params, &RmuPlan::default(), &forget, &retain, test)
        .map_err(|e| e.to_string())?;
    let rmu_forget = rmu_record.last().loss_forget_test;
    let plan = FinetunePlan::default();
    let (_, rmu_attack) = finetune_attack(&base.config, &rmu_model, &plan, &forget, &retain, &test.forget, baseline)
        .map_err(|e| e.to_string())?;
    let (_, sgtm_attack) = finetune_attack(&sgtm.config, &sgtm.evaluated, &plan, &forget, &retain, &test.forget, baseline)
        .map_err(|e| e.to_string())?;
    eprintln!("[lab] rmu and attacks in {:.1}s", t.elapsed().as_secs_f64());
    let detail = format!(
        "baseline forget {baseline:.3}; rmu raised forget loss to {rmu_forget:.3}; steps to baseline: sgtm {}, rmu {}",
        fmt_steps(&sgtm_attack, plan.max_steps),
        fmt_steps(&rmu_attack, plan.max_steps)
    );
    if rmu_forget <= baseline + plan.tolerance {
        return Err(format!("rmu did not unlearn; {detail}"));
    }
    let Some(rmu_steps) = rmu_attack.steps_to_baseline else {
        return Err(format!("rmu model never relearned within the cap; {detail}"));
    };
    // a capped sgtm attack still bounds its steps from below by the cap
    let sgtm_steps = sgtm_attack.steps_to_baseline.unwrap_or(plan.max_steps);
    if sgtm_steps >= 2 * rmu_steps {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn calibration_checks(lab: &Lab) -> Outcome {
    let run = lab.run(SIZES[0].1, Kind::Sgtm, 0.01);
    let desig = run.desig.as_ref().expect("sgtm designation");
    let mut gains = Vec::new();
    for (step, params) in &run.checkpoints {
        let ablated = ablate(params, desig).map_err(|e| e.to_string())?;
        let cal = calibrate_params(&run.config, &ablated, &lab.corpus(SIZES[0].1));
        if cal.objective_after() > cal.objective_before() {
            return Err(format!("checkpoint {step}: calibration raised the objective"));
        }
        if cal.objective.windows(2).any(|w| w[1] > w[0]) {
            return Err(format!("checkpoint {step}: objective trace not monotone"));
        }
        gains.push(cal.objective_before() - cal.objective_after());
    }
    Ok(format!(
        "{} post-ablation checkpoints, objective reductions from {:.4} to {:.4}",
        gains.len(),
        gains.iter().cloned().fold(f64::INFINITY, f64::min),
        gains.iter().cloned().fold(0.0, f64::max)
    ))
}

fn scaling(lab: &Lab) -> Outcome {
    let synthetic: Vec<(f64, f64)> = (0..8).map(|k| 10f64.powf(3.0 + k as f64)).map(|c| (c, 10.0 * c.powf(-0.1))).collect();
    let fit = fit_power_law(&synthetic).map_err(|e| e.to_string())?;
    if (fit.alpha - 10.0).abs() >= 1e-6 || (fit.beta - 0.1).abs() >= 1e-6 {
        return Err(format!("synthetic fit alpha {} beta {}", fit.alpha, fit.beta));
    }
    let full = 1e9;
    let mut round_trip: f64 = 0.0;
    for loss in [1.2, 1.5, 2.0, 3.0] {
        let c = fit.compute_for(loss);
        round_trip = round_trip.max((fit.loss_at(c) - loss).abs());
        let penalty = compute_penalty(loss, &fit, full);
        round_trip = round_trip.max((penalty - (1.0 - c / full)).abs());
    }
    if round_trip >= 1e-10 || compute_penalty(fit.loss_at(full), &fit, full).abs() >= 1e-10 {
        return Err(format!("compute penalty round trip error {round_trip:e}"));
    }
    let runs: Vec<(f64, EvalLosses)> = SIZES
        .iter()
        .map(|&(_, d)| {
            let last = lab.run(d, Kind::FilterNone, 0.0).record.last().clone();
            (last.flops, EvalLosses { forget: last.loss_forget_test, retain: last.loss_retain_test, related: last.loss_related_test })
        })
        .collect();
    let real = fit_scaling(&runs).map_err(|e| e.to_string())?;
    let rmse = [real.forget.rmse_log, real.retain.rmse_log, real.related.rmse_log];
    let detail = format!(
        "synthetic (10, 0.1) recovered, round trip {round_trip:.1e}; desk fits over {} sizes: log rmse forget {:.4} retain {:.4} related {:.4}, beta retain {:.3}",
        runs.len(),
        rmse[0],
        rmse[1],
        rmse[2],
        real.retain.beta
    );
    if rmse.iter().all(|&r| r < 0.05) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn variant_differentiation() -> Outcome {
    let config = small_config();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let batch = random_batch(&mut rng, &config, 4);
    let params = ParamSet::<f64>::init(&config, 8);
    let d_forget = 8;
    let d = config.d_model;
    // per block and retain row of W_2: whether the gradient is nonzero
    let pattern = |variant: Variant| -> Result<Vec<bool>, String> {
        let desig = build_designation(&config, &PartitionSpec::new(1, d_forget, variant)).map_err(|e| e.to_string())?;
        let plan = InterventionPlan::new(desig);
        let (_, g) = loss_and_grads(&config, &params, &batch, plan.forward_options(BatchLabel::Forget, true))
            .map_err(|e| e.to_string())?;
        let g = plan.mask_gradients(g, BatchLabel::Forget);
        let mut rows = Vec::new();
        for l in 0..config.n_layers {
            let i = params.position(&format!("blocks.{l}.mlp.w_2")).expect("w_2");
            let w = g.get(i).data();
            rows.extend((d_forget..config.d_mlp).map(|r| w[r * d..(r + 1) * d].iter().any(|&x| x != 0.0)));
        }
        Ok(rows)
    };
    let sgtm = pattern(Variant::Sgtm)?;
    let gr = pattern(Variant::GradientRouting)?;
    let jp = pattern(Variant::SgtmJointProjection)?;
    let detail = format!(
        "nonzero W_2 retain rows on a FORGET batch: sgtm {}/{n}, gradient routing {}/{n}, joint projection {}/{n}",
        sgtm.iter().filter(|&&x| x).count(),
        gr.iter().filter(|&&x| x).count(),
        jp.iter().filter(|&&x| x).count(),
        n = sgtm.len()
    );
    if sgtm.iter().all(|&x| !x) && gr.iter().any(|&x| x) && gr == jp {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() -> ExitCode {
    let only: Option<Vec<usize>> = std::env::var("SGTM_ACCEPT")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let lab = Lab::new();
    let criteria: [(usize, &str, &dyn Fn() -> Outcome); 11] = [
        (1, "gradient exactness", &gradient_exactness),
        (2, "forward mask equals ablation", &mask_ablation_equivalence),
        (3, "finite differences", &finite_differences),
        (4, "trade-off at 1% undiscovered", &|| tradeoff(&lab)),
        (5, "label-noise robustness", &|| label_noise(&lab)),
        (6, "leakage", &|| leakage_check(&lab)),
        (7, "gradient-norm study", &|| grad_norms(&lab)),
        (8, "fine-tuning robustness", &|| finetune_robustness(&lab)),
        (9, "calibration", &|| calibration_checks(&lab)),
        (10, "scaling fit", &|| scaling(&lab)),
        (11, "variant differentiation", &variant_differentiation),
    ];
    let mut failed = 0;
    for (n, name, check) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let t = Instant::now();
        let outcome = check();
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n} ({name}): PASS [{secs:.1}s] {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL [{secs:.1}s] {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
