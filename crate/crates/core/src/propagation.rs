//! Loopy Gaussian belief propagation over the cluster graph and the outer
//! re-linearization loop.
//!
//! Each cluster potential is the sigma-point linearization of the projection
//! around the current priors, times the cluster's share of the feature and
//! pose priors, times the soft observation of its projection. A variable held
//! by `k` clusters contributes its prior raised to `1/k` in each of them, so
//! the product of all potentials counts every prior exactly once.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{moments_delta, GaussianFactor, Moments, VarKind, VariableId};
use crate::geometry::{project_vec, Calibration, WorldMode};
use crate::graph::ClusterGraph;
use crate::unscented::{joint_sigma_points, regress_joint, sigma_points, SigmaScheme};

/// Prior variance given to anchored gauge coordinates.
pub const ANCHOR_VARIANCE: f64 = 1e-8;

/// Floor on the linearization residual covariance, relative to the
/// observation variance. Without it a near-linear projection gives a residual
/// precision many orders above the evidence and eliminating the projection
/// variable cancels catastrophically.
pub const RESIDUAL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BpConfig {
    /// Inner loop stops once no sepset marginal moves by more than this.
    pub inner_tol: f64,
    pub max_inner_sweeps: usize,
    pub max_outer_iters: usize,
    /// Relative improvement of the best error over `patience` outer
    /// iterations below which the outer loop stops.
    pub outer_tol: f64,
    pub patience: usize,
    /// Covariance inflation factor applied when progress stalls.
    pub inflation: f64,
    /// Relative improvement over two outer iterations counted as a stall.
    pub stall_threshold: f64,
    pub max_consecutive_inflations: usize,
    /// Weight of the previous message when blending canonical parameters.
    pub damping: f64,
    /// Overrides every track's measurement noise when set.
    pub sigma_obs: Option<f64>,
    pub scheme: SigmaScheme,
    /// Pin the first camera's pose and one centre coordinate of the second.
    /// Off by default: the priors already fix the gauge softly, and a hard
    /// pin at one camera makes loopy BP settle the gauge very slowly.
    pub anchor_gauge: bool,
    /// What the prior factors of later outer iterations are built from.
    pub prior_policy: PriorPolicy,
    /// Under [`PriorPolicy::Original`], the previous posterior raised to this
    /// power joins the prior factors as a proximal term. Zero disables it.
    pub proximal_weight: f64,
    /// Start each outer iteration's BP from the previous iteration's messages.
    pub warm_start: bool,
    pub seed: u64,
}

/// Source of the prior factors once the outer loop has a posterior.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorPolicy {
    /// Keep the caller's priors; the posterior only sets the linearization
    /// point and spread.
    #[default]
    Original,
    /// Use the previous posterior as the next prior.
    Chained,
}

impl Default for BpConfig {
    fn default() -> Self {
        BpConfig {
            inner_tol: 1e-6,
            max_inner_sweeps: 200,
            max_outer_iters: 50,
            outer_tol: 1e-4,
            patience: 3,
            inflation: 10.0,
            stall_threshold: 0.01,
            max_consecutive_inflations: 2,
            damping: 0.3,
            sigma_obs: None,
            scheme: SigmaScheme::default(),
            anchor_gauge: false,
            prior_policy: PriorPolicy::default(),
            proximal_weight: 0.1,
            warm_start: true,
            seed: 0,
        }
    }
}

impl BpConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(what.to_string()));
        if !(self.inner_tol > 0.0) || !(self.outer_tol > 0.0) {
            return bad("tolerances must be positive");
        }
        if self.max_inner_sweeps == 0 || self.max_outer_iters == 0 || self.patience == 0 {
            return bad("iteration bounds must be positive");
        }
        if !(self.proximal_weight >= 0.0) {
            return bad("proximal weight must be non-negative");
        }
        if !(self.inflation >= 1.0) {
            return bad("inflation factor must be at least 1");
        }
        if !(0.0..1.0).contains(&self.damping) {
            return bad("damping must lie in [0, 1)");
        }
        if let Some(s) = self.sigma_obs {
            if !(s > 0.0) {
                return bad("sigma_obs must be positive");
            }
        }
        if let SigmaScheme::Standard { w0 } = self.scheme {
            if !(w0 > 0.0 && w0 < 1.0) {
                return bad("w0 must lie in (0, 1)");
            }
        }
        Ok(())
    }
}

/// Gaussian priors (or re-linearization points) for every latent variable.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Priors {
    pub features: BTreeMap<usize, Moments>,
    pub cameras: BTreeMap<usize, Moments>,
}

impl Priors {
    pub fn get(&self, var: &VariableId) -> Option<&Moments> {
        match var.kind {
            VarKind::Feature(i) => self.features.get(&i),
            VarKind::Pose(j) => self.cameras.get(&j),
            VarKind::Projection { .. } => None,
        }
    }

    pub fn inflated(&self, gamma: f64) -> Priors {
        let scale = |m: &BTreeMap<usize, Moments>| {
            m.iter()
                .map(|(k, v)| (*k, Moments::new(v.mean.clone(), &v.cov * gamma)))
                .collect()
        };
        Priors {
            features: scale(&self.features),
            cameras: scale(&self.cameras),
        }
    }

    /// Per-variable product `self · other^weight`; variables missing from
    /// `other` are kept as they are.
    pub fn fused(&self, other: &Priors, weight: f64) -> Result<Priors> {
        let fuse = |var: VariableId, a: &Moments, b: Option<&Moments>| -> Result<Moments> {
            let Some(b) = b else { return Ok(a.clone()) };
            GaussianFactor::from_moments(&[var], &a.mean, &a.cov)?
                .multiply(&GaussianFactor::from_moments(&[var], &b.mean, &b.cov)?.powf(weight))?
                .to_moments()
        };
        let mut out = Priors::default();
        for (&i, m) in &self.features {
            let var = VariableId::feature(i, m.mean.len());
            out.features.insert(i, fuse(var, m, other.features.get(&i))?);
        }
        for (&j, m) in &self.cameras {
            let var = VariableId::pose(j, m.mean.len());
            out.cameras.insert(j, fuse(var, m, other.cameras.get(&j))?);
        }
        Ok(out)
    }

    /// Remove the similarity gauge: the lowest-numbered camera gets a
    /// near-deterministic pose, and the centre coordinate along which the
    /// next camera is farthest from it is pinned to fix scale.
    pub fn anchored(&self) -> Priors {
        let mut out = self.clone();
        let mut ids = self.cameras.keys().copied();
        let (Some(first), second) = (ids.next(), ids.next()) else {
            return out;
        };
        let c0 = out.cameras.get_mut(&first).expect("listed camera");
        let n = c0.mean.len();
        c0.cov = DMatrix::identity(n, n) * ANCHOR_VARIANCE;
        let centre0 = c0.mean.clone();
        if let Some(second) = second {
            let c1 = out.cameras.get_mut(&second).expect("listed camera");
            let d = if n == 3 { 2 } else { 3 };
            let axis = (0..d)
                .max_by(|&a, &b| {
                    (c1.mean[a] - centre0[a])
                        .abs()
                        .total_cmp(&(c1.mean[b] - centre0[b]).abs())
                })
                .unwrap_or(0);
            for k in 0..n {
                c1.cov[(axis, k)] = 0.0;
                c1.cov[(k, axis)] = 0.0;
            }
            c1.cov[(axis, axis)] = ANCHOR_VARIANCE;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub error: f64,
    pub best_error: f64,
    pub inner_sweeps: usize,
    pub inner_converged: bool,
    /// Largest sepset marginal change in the last inner sweep.
    pub inner_delta: f64,
    pub skipped_messages: usize,
    /// Covariances were inflated before this iteration's re-linearization.
    pub inflated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorEstimate {
    pub mode: WorldMode,
    pub features: BTreeMap<usize, Moments>,
    pub cameras: BTreeMap<usize, Moments>,
    pub trace: Vec<IterationRecord>,
    /// Largest moment disagreement between clusters covering one variable.
    pub disagreement: f64,
    /// Outer iteration whose estimate was returned.
    pub accepted_iteration: Option<usize>,
}

impl PosteriorEstimate {
    /// The prior means and covariances as an estimate.
    pub fn from_priors(mode: WorldMode, priors: &Priors) -> Self {
        PosteriorEstimate {
            mode,
            features: priors.features.clone(),
            cameras: priors.cameras.clone(),
            trace: Vec::new(),
            disagreement: 0.0,
            accepted_iteration: None,
        }
    }

    pub fn as_priors(&self) -> Priors {
        Priors {
            features: self.features.clone(),
            cameras: self.cameras.clone(),
        }
    }
}

fn holder_counts(graph: &ClusterGraph) -> BTreeMap<VariableId, usize> {
    let mut counts = BTreeMap::new();
    for c in &graph.clusters {
        for v in &c.scope {
            *counts.entry(*v).or_default() += 1;
        }
    }
    counts
}

/// Linearized cluster potential over `{X, p, x}` before evidence and prior
/// shares: the conditional of the projection given pose and feature. The
/// residual covariance is floored at `residual_floor · I`.
pub fn projection_conditional(
    mode: WorldMode,
    calibration: &Calibration,
    scope: &[VariableId],
    feature_prior: &Moments,
    pose_prior: &Moments,
    scheme: SigmaScheme,
    residual_floor: f64,
) -> Result<GaussianFactor> {
    let (xvar, pvar, yvar) = (scope[0], scope[1], scope[2]);
    let sx = sigma_points(&feature_prior.mean, &feature_prior.cov, scheme)?;
    let sp = sigma_points(&pose_prior.mean, &pose_prior.cov, scheme)?;
    let joint = joint_sigma_points(&sx, &sp, |p, x| project_vec(p, calibration, x, mode))?;
    let fit = regress_joint(&joint, mode.image_dim())?;
    let mut q = fit.residual_cov;
    for k in 0..q.nrows() {
        q[(k, k)] += residual_floor;
    }
    GaussianFactor::linear_gaussian(yvar, &[pvar, xvar], &fit.a, &fit.b, &q)
}

/// Build every cluster's potential around `priors` and reset all messages.
pub fn init_cluster_beliefs(graph: &mut ClusterGraph, priors: &Priors, config: &BpConfig) -> Result<()> {
    init_cluster_beliefs_at(graph, priors, priors, config)
}

/// As [`init_cluster_beliefs`], but the sigma points come from `linearization`
/// while the prior shares come from `priors`.
pub fn init_cluster_beliefs_at(
    graph: &mut ClusterGraph,
    linearization: &Priors,
    priors: &Priors,
    config: &BpConfig,
) -> Result<()> {
    let counts = holder_counts(graph);
    let mode = graph.mode;
    let scheme = config.scheme;
    let sigma_override = config.sigma_obs;
    graph.clusters.par_iter_mut().try_for_each(|cluster| {
        let wrap = |e: Error| Error::InCluster {
            cluster: cluster.id,
            source: Box::new(e),
        };
        let xvar = cluster.feature_var();
        let pvar = cluster.pose_var();
        let yvar = cluster.projection_var();
        let lx = linearization.get(&xvar).ok_or(Error::MissingPrior(xvar))?;
        let lp = linearization.get(&pvar).ok_or(Error::MissingPrior(pvar))?;
        let px = priors.get(&xvar).ok_or(Error::MissingPrior(xvar))?;
        let pp = priors.get(&pvar).ok_or(Error::MissingPrior(pvar))?;
        let sigma = sigma_override.unwrap_or(cluster.sigma);
        let floor = RESIDUAL_FLOOR * sigma * sigma;
        let conditional = projection_conditional(mode, &cluster.calibration, &cluster.scope, lx, lp, scheme, floor)
            .map_err(wrap)?;
        let share_x = GaussianFactor::from_moments(&[xvar], &px.mean, &px.cov)
            .map_err(wrap)?
            .powf(1.0 / counts[&xvar] as f64);
        let share_p = GaussianFactor::from_moments(&[pvar], &pp.mean, &pp.cov)
            .map_err(wrap)?
            .powf(1.0 / counts[&pvar] as f64);
        let potential = conditional
            .multiply(&share_x)?
            .multiply(&share_p)?
            .observe(&yvar, &cluster.observation, sigma)
            .map_err(wrap)?;
        cluster.belief = potential.clone();
        cluster.potential = potential;
        Ok::<(), Error>(())
    })?;
    for (e, s) in graph.sepsets.iter().enumerate() {
        graph.messages[2 * e] = GaussianFactor::unit(&s.vars);
        graph.messages[2 * e + 1] = GaussianFactor::unit(&s.vars);
    }
    graph.sent.iter_mut().for_each(|s| *s = None);
    Ok(())
}

/// Install `messages` (one per directed edge, as left by an earlier BP run on
/// the same graph) and rebuild every belief as its potential times its
/// incoming messages.
pub fn restore_messages(graph: &mut ClusterGraph, messages: Vec<GaussianFactor>) -> Result<()> {
    if messages.len() != graph.messages.len() {
        return Err(Error::Mismatch(format!(
            "{} messages for {} directed edges",
            messages.len(),
            graph.messages.len()
        )));
    }
    graph.messages = messages;
    for c in 0..graph.clusters.len() {
        let mut belief = graph.clusters[c].potential.clone();
        for &e in &graph.adjacency[c] {
            let incoming = if graph.sepsets[e].b == c { 2 * e } else { 2 * e + 1 };
            belief = belief.multiply(&graph.messages[incoming])?;
        }
        graph.clusters[c].belief = belief;
    }
    graph.sent.iter_mut().for_each(|s| *s = None);
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MessageOutcome {
    /// Message sent; `delta` is the change of the sender's sepset marginal
    /// since the previous send (infinite on the first send).
    Sent { delta: f64 },
    /// The sender's belief could not be marginalized onto the sepset.
    Skipped,
}

/// Sum-product message along `edge` (from `a` to `b`, or `b` to `a` when
/// `reverse`), in belief-update form.
pub fn pass_message(graph: &mut ClusterGraph, edge: usize, reverse: bool, damping: f64) -> Result<MessageOutcome> {
    let s = &graph.sepsets[edge];
    let (from, to) = if reverse { (s.b, s.a) } else { (s.a, s.b) };
    let fwd = 2 * edge + usize::from(reverse);
    let back = 2 * edge + usize::from(!reverse);

    let marginal = match graph.clusters[from].belief.marginalize(&s.vars) {
        Ok(m) => m,
        Err(Error::SingularEliminationBlock) => return Ok(MessageOutcome::Skipped),
        Err(e) => return Err(e),
    };
    let mut message = marginal.clone();
    message.accumulate(&graph.messages[back], -1.0)?;
    if damping > 0.0 {
        message = message.powf(1.0 - damping);
        message.accumulate(&graph.messages[fwd], damping)?;
    }
    let mut update = message.clone();
    update.accumulate(&graph.messages[fwd], -1.0)?;
    graph.clusters[to].belief.accumulate(&update, 1.0)?;
    graph.messages[fwd] = message;

    let delta = match marginal.to_moments() {
        Ok(m) => {
            let d = graph.sent[fwd].as_ref().map_or(f64::INFINITY, |prev| moments_delta(prev, &m));
            graph.sent[fwd] = Some(m);
            d
        }
        Err(_) => f64::INFINITY,
    };
    Ok(MessageOutcome::Sent { delta })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InnerReport {
    pub sweeps: usize,
    pub final_delta: f64,
    pub skipped: usize,
    pub converged: bool,
}

/// Directed edges in sweep order: by sender id, then by receiver id.
pub fn schedule(graph: &ClusterGraph) -> Vec<(usize, bool)> {
    let mut out = Vec::with_capacity(2 * graph.sepsets.len());
    for c in 0..graph.clusters.len() {
        let mut incident: Vec<(usize, usize, bool)> = graph.adjacency[c]
            .iter()
            .map(|&e| {
                let s = &graph.sepsets[e];
                if s.a == c {
                    (s.b, e, false)
                } else {
                    (s.a, e, true)
                }
            })
            .collect();
        incident.sort();
        out.extend(incident.into_iter().map(|(_, e, rev)| (e, rev)));
    }
    out
}

/// Round-robin sweeps until sepset marginals settle or the sweep budget is
/// spent. Non-convergence is reported, not an error.
pub fn run_inner_bp(graph: &mut ClusterGraph, config: &BpConfig) -> Result<InnerReport> {
    let order = schedule(graph);
    if order.is_empty() {
        return Ok(InnerReport {
            sweeps: 0,
            final_delta: 0.0,
            skipped: 0,
            converged: true,
        });
    }
    let mut skipped = 0;
    let mut final_delta = f64::INFINITY;
    for sweep in 1..=config.max_inner_sweeps {
        let mut max_delta: f64 = 0.0;
        for &(edge, reverse) in &order {
            match pass_message(graph, edge, reverse, config.damping)? {
                MessageOutcome::Sent { delta } => max_delta = max_delta.max(delta),
                MessageOutcome::Skipped => {
                    skipped += 1;
                    max_delta = f64::INFINITY;
                }
            }
        }
        final_delta = max_delta;
        if max_delta < config.inner_tol {
            return Ok(InnerReport {
                sweeps: sweep,
                final_delta,
                skipped,
                converged: true,
            });
        }
    }
    Ok(InnerReport {
        sweeps: config.max_inner_sweeps,
        final_delta,
        skipped,
        converged: false,
    })
}

fn precision_trace(f: &GaussianFactor) -> f64 {
    f.precision().trace()
}

/// Per-variable marginals for every feature and camera, each read from the
/// covering cluster whose marginal has the largest precision trace.
pub fn extract_posterior(graph: &ClusterGraph) -> Result<PosteriorEstimate> {
    let mut holders: BTreeMap<VariableId, Vec<usize>> = BTreeMap::new();
    for c in &graph.clusters {
        holders.entry(c.feature_var()).or_default().push(c.id);
        holders.entry(c.pose_var()).or_default().push(c.id);
    }
    let holders: Vec<(VariableId, Vec<usize>)> = holders.into_iter().collect();
    let results = holders
        .par_iter()
        .map(|(var, ids)| {
            let marginals = ids
                .iter()
                .map(|&id| graph.clusters[id].belief.marginalize(&[*var]))
                .collect::<Result<Vec<_>>>()
                .map_err(|_| Error::NotPositiveDefinite)?;
            let best = marginals
                .iter()
                .enumerate()
                .max_by(|a, b| precision_trace(a.1).total_cmp(&precision_trace(b.1)))
                .map(|(k, _)| k)
                .expect("every variable has a holder");
            let chosen = marginals[best].to_moments()?;
            let mut disagreement: f64 = 0.0;
            for (k, m) in marginals.iter().enumerate() {
                if k != best {
                    if let Ok(other) = m.to_moments() {
                        disagreement = disagreement.max(moments_delta(&chosen, &other));
                    }
                }
            }
            Ok((*var, chosen, disagreement))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut estimate = PosteriorEstimate {
        mode: graph.mode,
        features: BTreeMap::new(),
        cameras: BTreeMap::new(),
        trace: Vec::new(),
        disagreement: 0.0,
        accepted_iteration: None,
    };
    for (var, m, d) in results {
        estimate.disagreement = estimate.disagreement.max(d);
        match var.kind {
            VarKind::Feature(i) => {
                estimate.features.insert(i, m);
            }
            VarKind::Pose(j) => {
                estimate.cameras.insert(j, m);
            }
            VarKind::Projection { .. } => {}
        }
    }
    Ok(estimate)
}

/// Mean image distance between projected means and observations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReprojectionSummary {
    pub mean: f64,
    pub count: usize,
    /// Tracks skipped because the point projected onto the principal plane.
    pub excluded: usize,
}

/// Re-projection error of `(camera, feature, K, x̂)` items under the means of
/// `cameras` and `features`.
pub fn mean_reprojection_error<'a, I>(
    mode: WorldMode,
    cameras: &BTreeMap<usize, Moments>,
    features: &BTreeMap<usize, Moments>,
    items: I,
) -> Result<ReprojectionSummary>
where
    I: IntoIterator<Item = (usize, usize, &'a Calibration, &'a DVector<f64>)>,
{
    let mut total = 0.0;
    let mut count = 0;
    let mut excluded = 0;
    for (j, i, k, observed) in items {
        let pose = cameras
            .get(&j)
            .ok_or_else(|| Error::Mismatch(format!("estimate has no camera {j}")))?;
        let point = features
            .get(&i)
            .ok_or_else(|| Error::Mismatch(format!("estimate has no feature {i}")))?;
        match project_vec(&pose.mean, k, &point.mean, mode) {
            Ok(x) => {
                total += (x - observed).norm();
                count += 1;
            }
            Err(Error::DepthDegenerate { .. }) => excluded += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(ReprojectionSummary {
        mean: if count > 0 { total / count as f64 } else { 0.0 },
        count,
        excluded,
    })
}

/// Re-projection error of an estimate against the graph's observations.
pub fn graph_reprojection_error(graph: &ClusterGraph, estimate: &PosteriorEstimate) -> Result<ReprojectionSummary> {
    mean_reprojection_error(
        graph.mode,
        &estimate.cameras,
        &estimate.features,
        graph
            .clusters
            .iter()
            .map(|c| (c.camera, c.feature, &c.calibration, &c.observation)),
    )
}

fn relative_gain(before: f64, after: f64) -> f64 {
    if before <= 0.0 || !before.is_finite() {
        0.0
    } else {
        (before - after) / before
    }
}

/// Iterated re-linearization: build potentials around the current estimate,
/// run loopy BP, read the posterior, and repeat from it. Covariances are
/// inflated when the error stalls. Returns the lowest-error estimate with
/// the full trace.
pub fn solve<F>(
    graph: &mut ClusterGraph,
    priors: &Priors,
    config: &BpConfig,
    mut progress: F,
) -> Result<PosteriorEstimate>
where
    F: FnMut(&IterationRecord),
{
    config.validate()?;
    let anchor = |p: &Priors| if config.anchor_gauge { p.anchored() } else { p.clone() };
    let original = anchor(priors);
    let mut current = original.clone();
    let mut trace: Vec<IterationRecord> = Vec::new();
    let mut best: Option<PosteriorEstimate> = None;
    let mut best_history: Vec<f64> = Vec::new();
    let mut consecutive_inflations = 0;
    let mut inflated_now = false;

    for iteration in 0..config.max_outer_iters {
        let ctx = |e: Error| Error::InOuterIteration {
            iteration,
            source: Box::new(e),
        };
        let prior_factors = match config.prior_policy {
            PriorPolicy::Original if iteration > 0 && config.proximal_weight > 0.0 => {
                original.fused(&current, config.proximal_weight).map_err(ctx)?
            }
            PriorPolicy::Original => original.clone(),
            PriorPolicy::Chained => current.clone(),
        };
        let previous = (config.warm_start && iteration > 0).then(|| graph.messages.clone());
        init_cluster_beliefs_at(graph, &current, &prior_factors, config).map_err(ctx)?;
        if let Some(messages) = previous {
            restore_messages(graph, messages).map_err(ctx)?;
        }
        let inner = run_inner_bp(graph, config).map_err(ctx)?;
        let estimate = extract_posterior(graph).map_err(ctx)?;
        let err = graph_reprojection_error(graph, &estimate).map_err(ctx)?.mean;

        let prev_best = best_history.last().copied().unwrap_or(f64::INFINITY);
        if err.is_finite() && err < prev_best {
            let mut e = estimate.clone();
            e.accepted_iteration = Some(iteration);
            best = Some(e);
        }
        let best_err = prev_best.min(if err.is_finite() { err } else { f64::INFINITY });
        best_history.push(best_err);
        let record = IterationRecord {
            iteration,
            error: err,
            best_error: best_err,
            inner_sweeps: inner.sweeps,
            inner_converged: inner.converged,
            inner_delta: inner.final_delta,
            skipped_messages: inner.skipped,
            inflated: inflated_now,
        };
        progress(&record);
        trace.push(record);

        let n = best_history.len();
        if n > config.patience
            && relative_gain(best_history[n - 1 - config.patience], best_err) < config.outer_tol
        {
            break;
        }
        let stalled = n > 2 && relative_gain(best_history[n - 3], best_err) < config.stall_threshold;

        let base = if err.is_finite() {
            estimate.as_priors()
        } else {
            best.as_ref().map_or_else(|| priors.clone(), |b| b.as_priors())
        };
        inflated_now = stalled && consecutive_inflations < config.max_consecutive_inflations;
        current = if inflated_now {
            consecutive_inflations += 1;
            anchor(&base.inflated(config.inflation))
        } else {
            consecutive_inflations = 0;
            anchor(&base)
        };
    }

    let mut out = best.ok_or_else(|| Error::InvalidArgument("no outer iteration produced a finite error".into()))?;
    out.trace = trace;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project, Pose};
    use crate::graph::{make_clusters, Track};

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn calibs(mode: WorldMode, n: usize) -> BTreeMap<usize, Calibration> {
        (0..n).map(|j| (j, Calibration::identity(mode))).collect()
    }

    /// Two identity-oriented cameras at x = ±1 looking down +z at (0, 0, 5).
    fn stereo(sigma: f64) -> (ClusterGraph, Priors) {
        let mode = WorldMode::ThreeD;
        let point = v(&[0.0, 0.0, 5.0]);
        let mut tracks = Vec::new();
        let mut priors = Priors::default();
        for (j, cx) in [-1.0, 1.0].into_iter().enumerate() {
            let pose = Pose::new(v(&[cx, 0.0, 0.0]), v(&[0.0, 0.0, 0.0])).unwrap();
            let uv = project(&pose, &Calibration::identity(mode), &point, mode).unwrap();
            tracks.push(Track {
                camera: j,
                feature: 0,
                observed: uv,
                sigma,
            });
            priors.cameras.insert(j, Moments::isotropic(pose.to_vector(), 1e-12));
        }
        priors.features.insert(0, Moments::isotropic(v(&[0.3, -0.2, 5.5]), 0.25));
        let cl = make_clusters(mode, &tracks, &calibs(mode, 2)).unwrap();
        (ClusterGraph::build(cl).unwrap(), priors)
    }

    #[test]
    fn stereo_beliefs_couple_feature_and_projection() {
        let (mut g, priors) = stereo(1e-3);
        init_cluster_beliefs(&mut g, &priors, &BpConfig::default()).unwrap();
        for c in &g.clusters {
            let m = c.belief.to_moments().unwrap();
            let xr = c.belief.block(&c.feature_var()).unwrap();
            let yr = c.belief.block(&c.projection_var()).unwrap();
            let cross = m.cov.view((xr.start, yr.start), (3, 2)).abs().max();
            assert!(cross > 1e-6);
        }
    }

    #[test]
    fn consistent_tight_prior_is_unchanged() {
        let (mut g, mut priors) = stereo(1e-3);
        priors.features.insert(0, Moments::isotropic(v(&[0.0, 0.0, 5.0]), 1e-10));
        init_cluster_beliefs(&mut g, &priors, &BpConfig::default()).unwrap();
        for c in &g.clusters {
            let m = c.belief.marginal_moments(&c.feature_var()).unwrap();
            assert!((m.mean - v(&[0.0, 0.0, 5.0])).abs().max() < 1e-6);
        }
    }

    #[test]
    fn uninformative_observation_leaves_unobserved_joint() {
        let (mut g, priors) = stereo(1e6);
        let config = BpConfig::default();
        init_cluster_beliefs(&mut g, &priors, &config).unwrap();
        let c = &g.clusters[0];
        let cond = projection_conditional(
            g.mode,
            &c.calibration,
            &c.scope,
            &priors.features[&0],
            &priors.cameras[&0],
            config.scheme,
            RESIDUAL_FLOOR * 1e12,
        )
        .unwrap();
        let unobserved = cond
            .multiply(&GaussianFactor::from_moments(&[c.feature_var()], &priors.features[&0].mean, &priors.features[&0].cov).unwrap().powf(0.5))
            .unwrap()
            .multiply(&GaussianFactor::from_moments(&[c.pose_var()], &priors.cameras[&0].mean, &priors.cameras[&0].cov).unwrap())
            .unwrap()
            .to_moments()
            .unwrap();
        let got = c.belief.to_moments().unwrap();
        let rel = (&got.mean - &unobserved.mean).norm() / unobserved.mean.norm();
        assert!(rel < 1e-3);
        let xr = c.belief.block(&c.feature_var()).unwrap();
        let a = got.cov.view((xr.start, xr.start), (3, 3)).into_owned();
        let b = unobserved.cov.view((xr.start, xr.start), (3, 3)).into_owned();
        assert!((&a - &b).norm() <= 1e-3 * b.norm());
    }

    #[test]
    fn single_cluster_needs_no_sweeps() {
        let (g, priors) = stereo(1e-3);
        let mut cl = g.clusters.clone();
        cl.truncate(1);
        let mut g1 = ClusterGraph::build(cl).unwrap();
        init_cluster_beliefs(&mut g1, &priors, &BpConfig::default()).unwrap();
        let r = run_inner_bp(&mut g1, &BpConfig::default()).unwrap();
        assert_eq!(r.sweeps, 0);
        assert!(r.converged);
    }

    #[test]
    fn first_message_is_sender_marginal() {
        let (mut g, priors) = stereo(1e-3);
        init_cluster_beliefs(&mut g, &priors, &BpConfig::default()).unwrap();
        let expected = g.clusters[0].belief.marginalize(&g.sepsets[0].vars).unwrap();
        pass_message(&mut g, 0, false, 0.0).unwrap();
        let got = g.message(0, false);
        assert!((got.precision() - expected.precision()).abs().max() < 1e-9 * expected.precision().abs().max());
        assert!((got.info() - expected.info()).abs().max() < 1e-9 * expected.info().abs().max());
    }

    #[test]
    fn two_cluster_chain_calibrates() {
        let (mut g, priors) = stereo(1e-3);
        init_cluster_beliefs(&mut g, &priors, &BpConfig::default()).unwrap();
        pass_message(&mut g, 0, false, 0.0).unwrap();
        pass_message(&mut g, 0, true, 0.0).unwrap();
        let var = g.sepsets[0].vars[0];
        let a = g.clusters[0].belief.marginal_moments(&var).unwrap();
        let b = g.clusters[1].belief.marginal_moments(&var).unwrap();
        assert!(moments_delta(&a, &b) < 1e-8);
    }

    #[test]
    fn damping_does_not_move_the_fixed_point() {
        let (mut g0, priors) = stereo(1e-3);
        let mut g1 = g0.clone();
        let undamped = BpConfig {
            damping: 0.0,
            inner_tol: 1e-12,
            ..BpConfig::default()
        };
        let damped = BpConfig {
            damping: 0.5,
            ..undamped.clone()
        };
        init_cluster_beliefs(&mut g0, &priors, &undamped).unwrap();
        init_cluster_beliefs(&mut g1, &priors, &damped).unwrap();
        assert!(run_inner_bp(&mut g0, &undamped).unwrap().converged);
        assert!(run_inner_bp(&mut g1, &damped).unwrap().converged);
        let a = extract_posterior(&g0).unwrap();
        let b = extract_posterior(&g1).unwrap();
        assert!(moments_delta(&a.features[&0], &b.features[&0]) < 1e-9);
    }

    #[test]
    fn anchoring_pins_first_camera_and_one_coordinate() {
        let mut priors = Priors::default();
        priors.cameras.insert(3, Moments::isotropic(v(&[0.0, 0.0, 0.0, 0.1, 0.2, 0.3]), 0.5));
        priors.cameras.insert(5, Moments::isotropic(v(&[1.0, -4.0, 2.0, 0.0, 0.0, 0.0]), 0.5));
        let a = priors.anchored();
        assert_eq!(a.cameras[&3].cov, DMatrix::identity(6, 6) * ANCHOR_VARIANCE);
        let c1 = &a.cameras[&5].cov;
        assert_eq!(c1[(1, 1)], ANCHOR_VARIANCE);
        assert_eq!(c1[(0, 0)], 0.5);
        assert_eq!(a.cameras[&5].mean, priors.cameras[&5].mean);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let bad = [
            BpConfig { inflation: 0.5, ..BpConfig::default() },
            BpConfig { damping: 1.0, ..BpConfig::default() },
            BpConfig { inner_tol: 0.0, ..BpConfig::default() },
            BpConfig { sigma_obs: Some(0.0), ..BpConfig::default() },
            BpConfig { scheme: SigmaScheme::Standard { w0: 1.0 }, ..BpConfig::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err());
        }
    }
}
