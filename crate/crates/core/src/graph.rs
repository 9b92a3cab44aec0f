//! Clusters, sepsets and cluster-graph construction.
//!
//! One cluster is created per observed projection, holding the projection,
//! the observing camera's pose and the observed feature. For every variable
//! the clusters containing it are joined in a star around the lowest cluster
//! id; the per-variable stars are then superimposed, and edges chosen by
//! several variables carry all of them in their sepset. Because each
//! variable's edges form a tree over exactly the clusters that contain it,
//! the running intersection property holds by construction.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::gaussian::{GaussianFactor, Moments, VarKind, VariableId};
use crate::geometry::{Calibration, WorldMode};

/// An observed projection of `feature` in `camera`, with its expected
/// measurement noise.
#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    pub camera: usize,
    pub feature: usize,
    pub observed: DVector<f64>,
    pub sigma: f64,
}

#[derive(Clone, Debug)]
pub struct Cluster {
    pub id: usize,
    pub camera: usize,
    pub feature: usize,
    /// Sorted scope `{X, p, x}`.
    pub scope: Vec<VariableId>,
    pub calibration: Calibration,
    pub observation: DVector<f64>,
    pub sigma: f64,
    /// Initial potential; its product over all clusters is the model joint.
    pub potential: GaussianFactor,
    pub belief: GaussianFactor,
}

impl Cluster {
    pub fn feature_var(&self) -> VariableId {
        self.scope[0]
    }

    pub fn pose_var(&self) -> VariableId {
        self.scope[1]
    }

    pub fn projection_var(&self) -> VariableId {
        self.scope[2]
    }

    pub fn contains(&self, var: &VariableId) -> bool {
        self.scope.iter().any(|v| v == var)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sepset {
    pub a: usize,
    pub b: usize,
    pub vars: Vec<VariableId>,
}

#[derive(Clone, Debug)]
pub struct ClusterGraph {
    pub mode: WorldMode,
    pub clusters: Vec<Cluster>,
    pub sepsets: Vec<Sepset>,
    /// Edge indices incident to each cluster.
    pub adjacency: Vec<Vec<usize>>,
    /// Directed messages; `2e` flows `a → b` along edge `e`, `2e + 1` flows
    /// `b → a`.
    pub(crate) messages: Vec<GaussianFactor>,
    /// Sepset marginal last sent along each directed edge.
    pub(crate) sent: Vec<Option<Moments>>,
}

/// Variables of one cluster in the given mode.
pub fn cluster_scope(mode: WorldMode, camera: usize, feature: usize) -> Vec<VariableId> {
    let mut scope = vec![
        VariableId::feature(feature, mode.world_dim()),
        VariableId::pose(camera, mode.pose_dim()),
        VariableId::projection(camera, feature, mode.image_dim()),
    ];
    scope.sort();
    scope
}

/// One cluster per observed projection, ordered by `(camera, feature)`.
pub fn make_clusters(
    mode: WorldMode,
    tracks: &[Track],
    calibrations: &BTreeMap<usize, Calibration>,
) -> Result<Vec<Cluster>> {
    let mut sorted: Vec<&Track> = tracks.iter().collect();
    sorted.sort_by_key(|t| (t.camera, t.feature));
    for w in sorted.windows(2) {
        if (w[0].camera, w[0].feature) == (w[1].camera, w[1].feature) {
            return Err(Error::DuplicateTrack {
                camera: w[0].camera,
                feature: w[0].feature,
            });
        }
    }
    let mut views: BTreeMap<usize, usize> = BTreeMap::new();
    for t in &sorted {
        *views.entry(t.feature).or_default() += 1;
    }
    if let Some((&i, _)) = views.iter().find(|(_, &n)| n < 2) {
        return Err(Error::UnderconstrainedFeature(i));
    }
    sorted
        .iter()
        .enumerate()
        .map(|(id, t)| {
            if t.observed.len() != mode.image_dim() {
                return Err(Error::InvalidArgument(format!(
                    "observation of feature {} in camera {} has {} coordinates",
                    t.feature,
                    t.camera,
                    t.observed.len()
                )));
            }
            let calibration = calibrations
                .get(&t.camera)
                .cloned()
                .ok_or_else(|| Error::InvalidArgument(format!("no calibration for camera {}", t.camera)))?;
            if calibration.mode() != mode {
                return Err(Error::InvalidArgument(format!(
                    "calibration of camera {} does not match {mode:?}",
                    t.camera
                )));
            }
            let scope = cluster_scope(mode, t.camera, t.feature);
            Ok(Cluster {
                id,
                camera: t.camera,
                feature: t.feature,
                potential: GaussianFactor::unit(&scope),
                belief: GaussianFactor::unit(&scope),
                scope,
                calibration,
                observation: t.observed.clone(),
                sigma: t.sigma,
            })
        })
        .collect()
}

impl ClusterGraph {
    /// Superimpose one star per variable, centred on the lowest cluster id
    /// containing it.
    pub fn build(clusters: Vec<Cluster>) -> Result<ClusterGraph> {
        let mode = clusters
            .first()
            .map(|c| c.calibration.mode())
            .ok_or_else(|| Error::InvalidArgument("cluster graph needs at least one cluster".into()))?;
        let mut holders: BTreeMap<VariableId, Vec<usize>> = BTreeMap::new();
        for c in &clusters {
            for v in &c.scope {
                holders.entry(*v).or_default().push(c.id);
            }
        }
        let mut edges: BTreeMap<(usize, usize), BTreeSet<VariableId>> = BTreeMap::new();
        for (var, ids) in &holders {
            let centre = *ids.iter().min().expect("non-empty holder list");
            for &other in ids.iter().filter(|&&id| id != centre) {
                let key = (centre.min(other), centre.max(other));
                edges.entry(key).or_default().insert(*var);
            }
        }
        let sepsets = edges
            .into_iter()
            .map(|((a, b), vars)| Sepset {
                a,
                b,
                vars: vars.into_iter().collect(),
            })
            .collect();
        Self::assemble(mode, clusters, sepsets)
    }

    /// Graph from explicit sepsets. Each sepset must be non-empty and
    /// contained in both endpoint scopes; the running intersection property
    /// is not checked here (see [`validate_rip`]).
    pub fn from_parts(clusters: Vec<Cluster>, sepsets: Vec<Sepset>) -> Result<ClusterGraph> {
        let mode = clusters
            .first()
            .map(|c| c.calibration.mode())
            .ok_or_else(|| Error::InvalidArgument("cluster graph needs at least one cluster".into()))?;
        for (i, c) in clusters.iter().enumerate() {
            if c.id != i {
                return Err(Error::InvalidArgument(format!("cluster at position {i} has id {}", c.id)));
            }
        }
        for s in &sepsets {
            if s.a >= clusters.len() || s.b >= clusters.len() || s.a == s.b {
                return Err(Error::InvalidArgument(format!("bad sepset endpoints {}-{}", s.a, s.b)));
            }
            if s.vars.is_empty() {
                return Err(Error::InvalidArgument(format!("empty sepset {}-{}", s.a, s.b)));
            }
            for v in &s.vars {
                if !clusters[s.a].contains(v) || !clusters[s.b].contains(v) {
                    return Err(Error::InvalidArgument(format!(
                        "sepset {}-{} variable {v} not shared by both clusters",
                        s.a, s.b
                    )));
                }
            }
        }
        Self::assemble(mode, clusters, sepsets)
    }

    fn assemble(mode: WorldMode, clusters: Vec<Cluster>, mut sepsets: Vec<Sepset>) -> Result<ClusterGraph> {
        for s in &mut sepsets {
            if s.a > s.b {
                std::mem::swap(&mut s.a, &mut s.b);
            }
            s.vars.sort();
        }
        let mut adjacency = vec![Vec::new(); clusters.len()];
        for (e, s) in sepsets.iter().enumerate() {
            adjacency[s.a].push(e);
            adjacency[s.b].push(e);
        }
        let messages = sepsets
            .iter()
            .flat_map(|s| [GaussianFactor::unit(&s.vars), GaussianFactor::unit(&s.vars)])
            .collect();
        let sent = vec![None; 2 * sepsets.len()];
        Ok(ClusterGraph {
            mode,
            clusters,
            sepsets,
            adjacency,
            messages,
            sent,
        })
    }

    /// Clusters containing `var`, in id order.
    pub fn holders(&self, var: &VariableId) -> Vec<usize> {
        self.clusters
            .iter()
            .filter(|c| c.contains(var))
            .map(|c| c.id)
            .collect()
    }

    /// All variables in the graph, sorted.
    pub fn variables(&self) -> Vec<VariableId> {
        let set: BTreeSet<VariableId> = self.clusters.iter().flat_map(|c| c.scope.iter().copied()).collect();
        set.into_iter().collect()
    }

    pub fn message(&self, edge: usize, reverse: bool) -> &GaussianFactor {
        &self.messages[2 * edge + usize::from(reverse)]
    }

    pub fn is_connected(&self) -> bool {
        if self.clusters.is_empty() {
            return true;
        }
        let mut seen = vec![false; self.clusters.len()];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(c) = stack.pop() {
            for &e in &self.adjacency[c] {
                let s = &self.sepsets[e];
                let n = if s.a == c { s.b } else { s.a };
                if !seen[n] {
                    seen[n] = true;
                    stack.push(n);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Graphviz rendering with sepsets as edge labels.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("graph clusters {\n");
        for c in &self.clusters {
            let _ = writeln!(
                out,
                "  c{} [label=\"x{}_{} p{} X{}\"];",
                c.id, c.camera, c.feature, c.camera, c.feature
            );
        }
        for s in &self.sepsets {
            let label: Vec<String> = s.vars.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(out, "  c{} -- c{} [label=\"{}\"];", s.a, s.b, label.join(","));
        }
        out.push_str("}\n");
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RipVerdict {
    Tree,
    /// The variable's edges close a loop.
    Cycle,
    /// Some clusters holding the variable are not linked by its edges.
    Disconnected,
}

#[derive(Clone, Debug)]
pub struct RipReport {
    pub per_variable: Vec<(VariableId, RipVerdict)>,
}

impl RipReport {
    pub fn passed(&self) -> bool {
        self.per_variable.iter().all(|(_, v)| *v == RipVerdict::Tree)
    }

    pub fn failures(&self) -> Vec<(VariableId, RipVerdict)> {
        self.per_variable
            .iter()
            .filter(|(_, v)| *v != RipVerdict::Tree)
            .copied()
            .collect()
    }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Check that, for every variable, the edges whose sepset carries it form a
/// spanning tree over the clusters holding it.
pub fn validate_rip(graph: &ClusterGraph) -> RipReport {
    let mut per_variable = Vec::new();
    for var in graph.variables() {
        let holders = graph.holders(&var);
        let index: BTreeMap<usize, usize> = holders.iter().enumerate().map(|(k, &c)| (c, k)).collect();
        let mut parent: Vec<usize> = (0..holders.len()).collect();
        let mut verdict = RipVerdict::Tree;
        let mut merges = 0;
        for s in graph.sepsets.iter().filter(|s| s.vars.contains(&var)) {
            let (Some(&a), Some(&b)) = (index.get(&s.a), index.get(&s.b)) else {
                // a sepset naming a variable one endpoint lacks cannot be built
                // through from_parts; treat it as breaking the tree
                verdict = RipVerdict::Disconnected;
                continue;
            };
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra == rb {
                verdict = RipVerdict::Cycle;
            } else {
                parent[ra] = rb;
                merges += 1;
            }
        }
        if verdict == RipVerdict::Tree && merges + 1 != holders.len() {
            verdict = RipVerdict::Disconnected;
        }
        per_variable.push((var, verdict));
    }
    RipReport { per_variable }
}

/// Count of clusters holding each feature variable.
pub fn feature_views(graph: &ClusterGraph) -> BTreeMap<usize, usize> {
    let mut out = BTreeMap::new();
    for c in &graph.clusters {
        if let VarKind::Feature(i) = c.feature_var().kind {
            *out.entry(i).or_default() += 1;
        }
    }
    out
}
