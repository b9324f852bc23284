//! Joint training of the warp network and the learned target latents.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::error::invalid;
use crate::generator::{fit_pca, mix, Generator, LatentBasis, MixedLatent, TargetLatent, ToyGenerator};
use crate::nn::AdamW;
use crate::par;
use crate::perceptual::{make_extractor, FeatureDistance};
use crate::stn::{class_label, flip_input, Classifier, ForwardCache, WarpNetwork, WarpResult};
use crate::tensor::Tensor;
use crate::warp::{identity_reg, identity_reg_grad, tv_loss, tv_loss_grad};
use crate::{Error, Result};

/// Everything needed to run or resume a trained model.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: TrainConfig,
    pub generator: ToyGenerator,
    pub basis: LatentBasis,
    pub network: WarpNetwork,
    pub targets: Vec<TargetLatent>,
    pub classifier: Option<Classifier>,
    pub step: usize,
}

impl Model {
    /// Fresh model: PCA basis from a seeded pool, zero-initialized targets.
    pub fn init(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let generator = ToyGenerator::new(config.toy.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(u64::MAX);
        let pool: Vec<Vec<f64>> = (0..config.pca_pool.max(2)).map(|_| generator.sample_latent_with(&mut rng)).collect();
        let basis = fit_pca(&pool)?;
        let network = WarpNetwork::new(config.network.clone())?;
        let targets = vec![TargetLatent::zeros(config.n_components); config.clusters];
        Ok(Self { config, generator, basis, network, targets, classifier: None, step: 0 })
    }

    pub fn distance(&self) -> FeatureDistance {
        make_extractor(self.config.extractor, self.config.extractor_seed)
    }

    pub fn target_latents(&self) -> Result<Vec<Vec<f64>>> {
        self.targets.iter().map(|t| t.materialize(&self.basis)).collect()
    }

    fn context<'a>(&'a self, distance: &'a FeatureDistance) -> LossContext<'a, ToyGenerator> {
        LossContext {
            gen: &self.generator,
            net: &self.network,
            distance,
            basis: &self.basis,
            config: &self.config,
        }
    }
}

/// Cosine weight of the learned target at `step`.
pub fn anneal_weight(step: usize, anneal_steps: usize) -> Result<f64> {
    if anneal_steps == 0 {
        return invalid("anneal_steps must be positive");
    }
    let t = (step as f64 / anneal_steps as f64).min(1.0);
    Ok(0.5 * (1.0 - (std::f64::consts::PI * t).cos()))
}

/// Target latent whose pose layers move from `w` (step 0) to `c` (after
/// `anneal_steps`); appearance layers always come from `w`.
pub fn anneal_target(
    w: &[f64],
    c: &[f64],
    step: usize,
    anneal_steps: usize,
    cutoff: usize,
    layers: usize,
) -> Result<MixedLatent> {
    let lambda = anneal_weight(step, anneal_steps)?;
    let pose: Vec<f64> = if lambda >= 1.0 {
        c.to_vec()
    } else if lambda <= 0.0 {
        w.to_vec()
    } else {
        w.iter().zip(c).map(|(a, b)| (1.0 - lambda) * a + lambda * b).collect()
    };
    mix(&pose, w, cutoff, layers)
}

/// Learning rate under cosine annealing with warm restarts.
pub fn cosine_lr(step: usize, base: f64, first_period: usize, period: usize) -> f64 {
    let (t, p) = if step < first_period || period == 0 {
        (step.min(first_period.max(1)), first_period.max(1))
    } else {
        ((step - first_period) % period, period)
    };
    0.5 * base * (1.0 + (std::f64::consts::PI * t as f64 / p as f64).cos())
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub align: f64,
    pub tv: f64,
    pub ident: f64,
}

impl LossTerms {
    fn add(&mut self, o: &LossTerms) {
        self.total += o.total;
        self.align += o.align;
        self.tv += o.tv;
        self.ident += o.ident;
    }

    fn scale(&mut self, k: f64) {
        self.total *= k;
        self.align *= k;
        self.tv *= k;
        self.ident *= k;
    }
}

/// Per-sample loss, hard assignment and (optionally) gradients.
#[derive(Clone, Debug)]
pub struct SampleOutcome {
    pub terms: LossTerms,
    pub cluster: usize,
    pub flipped: bool,
    /// Alignment loss of every branch, indexed `[cluster][flip]`.
    pub branch_losses: Vec<Vec<f64>>,
    pub grad_t: Option<Vec<f64>>,
    pub grad_c: Option<Vec<Vec<f64>>>,
}

/// Borrowed pieces needed to evaluate the training objective.
pub struct LossContext<'a, G: Generator + ?Sized> {
    pub gen: &'a G,
    pub net: &'a WarpNetwork,
    pub distance: &'a FeatureDistance,
    pub basis: &'a LatentBasis,
    pub config: &'a TrainConfig,
}

struct Branch {
    align: f64,
    result: WarpResult,
    cache: ForwardCache,
    input: Tensor,
}

impl<'a, G: Generator + ?Sized> LossContext<'a, G> {
    fn weight(&self, step: usize) -> Result<f64> {
        if self.config.anneal {
            anneal_weight(step, self.config.anneal_steps)
        } else {
            Ok(1.0)
        }
    }

    /// The (annealed) target latent for sample `w` and target `c`.
    pub fn target_latent(&self, w: &[f64], c: &[f64], step: usize) -> Result<Vec<f64>> {
        let steps = if self.config.anneal { self.config.anneal_steps } else { 1 };
        let s = if self.config.anneal { step } else { 1 };
        Ok(anneal_target(w, c, s, steps, self.config.cutoff, self.gen.layers())?.resolve())
    }

    /// Alignment loss of one cluster head, unflipped, forward only.
    pub fn align_loss(&self, target: &TargetLatent, cluster: usize, w: &[f64], step: usize) -> Result<f64> {
        let c = target.materialize(self.basis)?;
        let x = self.gen.synthesize(w)?;
        let y = self.gen.synthesize(&self.target_latent(w, &c, step)?)?;
        let res = self.net.forward(&x, cluster)?;
        self.distance.distance(&res.warped, &y)
    }

    /// Evaluate every cluster and flip branch for latent `w`, keep the
    /// minimum-alignment branch and optionally backpropagate through it.
    pub fn sample(&self, targets: &[TargetLatent], w: &[f64], step: usize, grads: bool) -> Result<SampleOutcome> {
        if targets.len() != self.net.clusters() {
            return invalid("target count differs from the network's cluster count");
        }
        let x = self.gen.synthesize(w)?;
        let flips: &[bool] = if self.config.flips { &[false, true] } else { &[false] };
        let x_flip = self.config.flips.then(|| flip_input(&x));
        let mut best: Option<(usize, bool, Branch, Vec<f64>, Tensor)> = None;
        let mut branch_losses = Vec::with_capacity(targets.len());
        for (k, target) in targets.iter().enumerate() {
            let c = target.materialize(self.basis)?;
            let tgt = self.target_latent(w, &c, step)?;
            let y = self.gen.synthesize(&tgt)?;
            let mut row = Vec::with_capacity(flips.len());
            for &flipped in flips {
                let input = if flipped { x_flip.clone().expect("flip image prepared") } else { x.clone() };
                let (result, cache) = self.net.forward_train(&input, k)?;
                let align = self.distance.distance(&result.warped, &y)?;
                row.push(align);
                // Strict comparison: lowest cluster wins ties, unflipped first.
                if best.as_ref().map_or(true, |b| align < b.2.align) {
                    best = Some((k, flipped, Branch { align, result, cache, input }, tgt.clone(), y.clone()));
                }
            }
            branch_losses.push(row);
        }
        let (cluster, flipped, branch, tgt, y) = best.expect("at least one branch");
        let flow = &branch.result.flow;
        let tv = tv_loss(flow)?;
        let ident = identity_reg(flow);
        let cfg = self.config;
        let terms = LossTerms { total: branch.align + cfg.lambda_tv * tv + cfg.lambda_i * ident, align: branch.align, tv, ident };
        let mut outcome = SampleOutcome { terms, cluster, flipped, branch_losses, grad_t: None, grad_c: None };
        if !grads {
            return Ok(outcome);
        }
        let (_, d_warped, d_y) = self.distance.distance_grad(&branch.result.warped, &y)?;
        let mut d_flow = tv_loss_grad(flow)?;
        for (a, b) in d_flow.iter_mut().zip(identity_reg_grad(flow)) {
            *a = cfg.lambda_tv * *a + cfg.lambda_i * b;
        }
        let mut grad_t = self.net.params.zeros_like();
        self.net.backward(&branch.input, &branch.cache, &d_warped, Some(&d_flow), &mut grad_t)?;
        let mut grad_c: Vec<Vec<f64>> = targets.iter().map(|t| vec![0.0; t.n()]).collect();
        let lambda = self.weight(step)?;
        if targets[cluster].n() > 0 && lambda > 0.0 {
            let d_latent = self.gen.synthesize_vjp(&tgt, &d_y)?;
            let split = cfg.cutoff * self.gen.block();
            let d_c: Vec<f64> =
                d_latent.iter().enumerate().map(|(j, g)| if j < split { lambda * g } else { 0.0 }).collect();
            grad_c[cluster] = targets[cluster].coefficient_grad(self.basis, &d_c);
        }
        outcome.grad_t = Some(grad_t);
        outcome.grad_c = Some(grad_c);
        Ok(outcome)
    }

    /// Batch mean of alignment plus weighted regularizers.
    pub fn total_loss(&self, targets: &[TargetLatent], batch: &[Vec<f64>], step: usize) -> Result<LossTerms> {
        if batch.is_empty() {
            return invalid("total_loss needs a non-empty batch");
        }
        let outs = par::map(self.config.execution, batch, |w| self.sample(targets, w, step, false));
        let mut terms = LossTerms::default();
        for o in outs {
            terms.add(&o?.terms);
        }
        terms.scale(1.0 / batch.len() as f64);
        Ok(terms)
    }

    /// Minimum alignment loss over clusters (and flips) with its argmin.
    pub fn cluster_align_loss(&self, targets: &[TargetLatent], w: &[f64], step: usize) -> Result<(f64, usize, bool)> {
        let o = self.sample(targets, w, step, false)?;
        Ok((o.terms.align, o.cluster, o.flipped))
    }
}

/// Latent-space K-means++ seeding under the image distance between
/// pose-only renderings (appearance fixed to the mean latent).
#[allow(clippy::too_many_arguments)]
pub fn kmeanspp_init<G: Generator + ?Sized>(
    gen: &G,
    distance: &FeatureDistance,
    basis: &LatentBasis,
    pool: &[Vec<f64>],
    k: usize,
    cutoff: usize,
    n_components: usize,
    exec: par::Execution,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<usize>, Vec<TargetLatent>)> {
    if k == 0 || k > pool.len() {
        return invalid(format!("cannot pick {k} centroids from a pool of {}", pool.len()));
    }
    let render = |w: &[f64]| -> Result<Tensor> { gen.synthesize(&mix(w, &basis.mean, cutoff, gen.layers())?.resolve()) };
    let mut chosen = vec![rng.gen_range(0..pool.len())];
    let mut nearest = vec![f64::INFINITY; pool.len()];
    while chosen.len() < k {
        let centroid = render(&pool[*chosen.last().expect("non-empty")])?;
        let d = par::map(exec, pool, |w| -> Result<f64> { distance.distance(&render(w)?, &centroid) });
        for (n, d) in nearest.iter_mut().zip(d) {
            *n = n.min(d?);
        }
        let weights: Vec<f64> = nearest.iter().map(|d| d * d).collect();
        let total: f64 = weights.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut pick = pool.len() - 1;
            for (i, wt) in weights.iter().enumerate() {
                if u < *wt {
                    pick = i;
                    break;
                }
                u -= wt;
            }
            pick
        } else {
            rng.gen_range(0..pool.len())
        };
        chosen.push(pick);
    }
    let targets = chosen
        .iter()
        .map(|&i| TargetLatent { coefficients: basis.project(&pool[i], n_components) })
        .collect();
    Ok((chosen, targets))
}

/// One row of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub terms: LossTerms,
    pub lr_t: f64,
    pub lr_c: f64,
}

pub const METRICS_HEADER: &str = "step,loss,align,tv,ident,lr_T,lr_c";

/// Where training writes its log and checkpoints.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub dir: Option<PathBuf>,
}

impl TrainOutputs {
    pub fn to_dir(dir: impl Into<PathBuf>) -> Self {
        Self { dir: Some(dir.into()) }
    }
}

fn batch_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64 + 1);
    rng
}

/// Optimizer state carried across calls to [`Trainer::run`].
pub struct Trainer {
    pub model: Model,
    opt_t: AdamW,
    opt_c: AdamW,
    pub history: Vec<StepMetrics>,
    outputs: TrainOutputs,
}

impl Trainer {
    pub fn new(model: Model, outputs: TrainOutputs) -> Result<Self> {
        let cfg = &model.config;
        let opt_t = AdamW::new(model.network.params.len(), cfg.beta1, cfg.beta2, cfg.weight_decay);
        let n_c = model.targets.iter().map(TargetLatent::n).sum();
        let opt_c = AdamW::new(n_c, cfg.beta1, cfg.beta2, 0.0);
        if let Some(dir) = &outputs.dir {
            std::fs::create_dir_all(dir)?;
            let log = dir.join("metrics.csv");
            if !log.exists() {
                std::fs::write(&log, format!("{METRICS_HEADER}\n"))?;
            }
        }
        Ok(Self { model, opt_t, opt_c, history: Vec::new(), outputs })
    }

    /// Seed the cluster targets with K-means++ when `K > 1`.
    pub fn init_clusters(&mut self) -> Result<()> {
        let cfg = &self.model.config;
        if cfg.clusters <= 1 {
            return Ok(());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(u64::MAX - 1);
        let gen = &self.model.generator;
        let pool: Vec<Vec<f64>> = (0..cfg.kmeans_pool.max(cfg.clusters)).map(|_| gen.sample_latent_with(&mut rng)).collect();
        let distance = self.model.distance();
        let (_, targets) = kmeanspp_init(
            gen,
            &distance,
            &self.model.basis,
            &pool,
            cfg.clusters,
            cfg.cutoff,
            cfg.n_components,
            cfg.execution,
            &mut rng,
        )?;
        self.model.targets = targets;
        Ok(())
    }

    pub fn learning_rates(&self, step: usize) -> (f64, f64) {
        let cfg = &self.model.config;
        let first = cfg.anneal_steps.min(cfg.total_steps.max(1));
        let period = if cfg.restart_period > 0 { cfg.restart_period } else { cfg.total_steps.saturating_sub(first) };
        (cosine_lr(step, cfg.lr_t, first, period), cosine_lr(step, cfg.lr_c, first, period))
    }

    /// One optimization step on a fresh batch.
    pub fn step(&mut self) -> Result<StepMetrics> {
        let step = self.model.step;
        let cfg = self.model.config.clone();
        let mut rng = batch_rng(cfg.seed, step);
        let batch: Vec<Vec<f64>> = (0..cfg.batch).map(|_| self.model.generator.sample_latent_with(&mut rng)).collect();
        let distance = self.model.distance();
        let outcomes = {
            let ctx = self.model.context(&distance);
            let targets = &self.model.targets;
            par::map(cfg.execution, &batch, |w| ctx.sample(targets, w, step, true))
        };
        let mut terms = LossTerms::default();
        let mut grad_t = self.model.network.params.zeros_like();
        let mut grad_c: Vec<f64> = vec![0.0; self.model.targets.iter().map(TargetLatent::n).sum()];
        for o in outcomes {
            let o = o?;
            terms.add(&o.terms);
            for (a, b) in grad_t.iter_mut().zip(o.grad_t.expect("requested")) {
                *a += b;
            }
            let flat: Vec<f64> = o.grad_c.expect("requested").into_iter().flatten().collect();
            for (a, b) in grad_c.iter_mut().zip(flat) {
                *a += b;
            }
        }
        let inv = 1.0 / cfg.batch as f64;
        terms.scale(inv);
        grad_t.iter_mut().for_each(|g| *g *= inv);
        grad_c.iter_mut().for_each(|g| *g *= inv);
        let finite = terms.total.is_finite() && grad_t.iter().chain(&grad_c).all(|g| g.is_finite());
        if !finite {
            let detail = format!("non-finite loss or gradient (loss = {})", terms.total);
            if let Some(dir) = &self.outputs.dir {
                crate::checkpoint::save(&self.model, &dir.join("diverged"))?;
            }
            return Err(Error::Diverged { step, detail });
        }
        let (lr_t, lr_c) = self.learning_rates(step);
        self.opt_t.step(&mut self.model.network.params.values, &grad_t, lr_t);
        if !grad_c.is_empty() {
            let mut flat: Vec<f64> = self.model.targets.iter().flat_map(|t| t.coefficients.clone()).collect();
            self.opt_c.step(&mut flat, &grad_c, lr_c);
            let mut it = flat.into_iter();
            for t in self.model.targets.iter_mut() {
                for a in t.coefficients.iter_mut() {
                    *a = it.next().expect("sizes match");
                }
            }
        }
        self.model.step += 1;
        Ok(StepMetrics { step, terms, lr_t, lr_c })
    }

    /// Train until `config.total_steps`, logging and checkpointing as configured.
    pub fn run(&mut self) -> Result<()> {
        let total = self.model.config.total_steps;
        while self.model.step < total {
            let m = self.step()?;
            let cfg = &self.model.config;
            let log_now = cfg.log_every > 0 && (m.step % cfg.log_every == 0 || m.step + 1 == total);
            if log_now {
                self.history.push(m);
                log::info!(
                    "step {} loss {:.5} align {:.5} tv {:.6} ident {:.6}",
                    m.step,
                    m.terms.total,
                    m.terms.align,
                    m.terms.tv,
                    m.terms.ident
                );
                if let Some(dir) = &self.outputs.dir {
                    append_metrics(&dir.join("metrics.csv"), &m)?;
                }
            }
            let every = self.model.config.checkpoint_every;
            if let Some(dir) = &self.outputs.dir {
                if every > 0 && self.model.step % every == 0 {
                    crate::checkpoint::save(&self.model, &dir.join(format!("step{:07}", self.model.step)))?;
                }
            }
        }
        Ok(())
    }
}

fn append_metrics(path: &Path, m: &StepMetrics) -> Result<()> {
    let mut f = std::fs::OpenOptions::new().append(true).create(true).open(path)?;
    writeln!(
        f,
        "{},{},{},{},{},{},{}",
        m.step, m.terms.total, m.terms.align, m.terms.tv, m.terms.ident, m.lr_t, m.lr_c
    )?;
    Ok(())
}

/// Full training run from a config: init, cluster seeding, descent and (for
/// clustered or flip-aware models) the assignment classifier.
pub fn train(config: TrainConfig, outputs: TrainOutputs) -> Result<Model> {
    let model = Model::init(config)?;
    let mut trainer = Trainer::new(model, outputs.clone())?;
    trainer.init_clusters()?;
    trainer.run()?;
    let mut model = trainer.model;
    model.classifier = train_classifier(&model, model.config.classifier_samples)?;
    if let Some(dir) = &outputs.dir {
        crate::checkpoint::save(&model, &dir.join("final"))?;
    }
    Ok(model)
}

/// Oracle label `(cluster, flipped)` for latent `w` under the trained targets.
pub fn assignment_label(model: &Model, distance: &FeatureDistance, w: &[f64]) -> Result<usize> {
    let ctx = model.context(distance);
    let (_, k, flipped) = ctx.cluster_align_loss(&model.targets, w, model.config.anneal_steps)?;
    Ok(class_label(k, flipped))
}

/// Train the cluster/flip classifier on generator samples labelled by the
/// hard-assignment oracle. Returns `None` when there is nothing to classify.
pub fn train_classifier(model: &Model, sample_budget: usize) -> Result<Option<Classifier>> {
    let cfg = &model.config;
    if cfg.clusters == 1 && !cfg.flips {
        return Ok(None);
    }
    let classes = 2 * cfg.clusters;
    let mut clf = Classifier::from_network(&model.network, classes, cfg.seed ^ 0x5eed);
    let distance = model.distance();
    let batch = cfg.classifier_batch.max(1);
    let steps = sample_budget.div_ceil(batch);
    let mut opt = AdamW::new(clf.params.len(), cfg.beta1, cfg.beta2, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xc1a55);
    for s in 0..steps {
        let ws: Vec<Vec<f64>> = (0..batch).map(|_| model.generator.sample_latent_with(&mut rng)).collect();
        let results = par::map(cfg.execution, &ws, |w| -> Result<(f64, Vec<f64>)> {
            let label = assignment_label(model, &distance, w)?;
            let x = model.generator.synthesize(w)?;
            let mut g = clf.params.zeros_like();
            let loss = clf.loss_grad(&x, label, &mut g);
            Ok((loss, g))
        });
        let mut grads = clf.params.zeros_like();
        let mut loss = 0.0;
        for r in results {
            let (l, g) = r?;
            loss += l;
            for (a, b) in grads.iter_mut().zip(g) {
                *a += b / batch as f64;
            }
        }
        let lr = cosine_lr(s, cfg.classifier_lr, steps, 0);
        opt.step(&mut clf.params.values, &grads, lr);
        if s % 50 == 0 {
            log::debug!("classifier step {s} loss {:.4}", loss / batch as f64);
        }
    }
    Ok(Some(clf))
}
