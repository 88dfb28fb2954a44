//! Skeleton graph construction: hop distances from the center joint,
//! root/centripetal/centrifugal partitioning, and the symmetric degree
//! normalization that the spatial convolution consumes.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::path::Path;

/// Number of neighbor subsets (root / centripetal / centrifugal). Fixed by
/// the partition strategy; not configurable.
pub const NUM_SUBSETS: usize = 3;

pub const SUBSET_ROOT: usize = 0;
pub const SUBSET_CENTRIPETAL: usize = 1;
pub const SUBSET_CENTRIFUGAL: usize = 2;

/// Degree regularizer keeping empty rows invertible.
pub const DEFAULT_ALPHA: f64 = 0.001;

/// A body graph: joints as vertices, natural bone connections as edges,
/// plus a designated center joint that anchors the partition strategy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkeletonSpec {
    name: String,
    num_joints: usize,
    edges: Vec<(usize, usize)>,
    center: usize,
}

impl SkeletonSpec {
    /// Validates index ranges, self-loops, duplicate edges, and
    /// connectivity. Cycles are allowed here; bone derivation rejects them
    /// separately because only it needs the tree property.
    pub fn new(
        name: impl Into<String>,
        num_joints: usize,
        edges: Vec<(usize, usize)>,
        center: usize,
    ) -> Result<Self> {
        if num_joints == 0 {
            return Err(Error::invalid("skeleton: need at least one joint"));
        }
        if center >= num_joints {
            return Err(Error::invalid(format!(
                "skeleton: center joint {center} out of range for {num_joints} joints"
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &(i, j) in &edges {
            if i >= num_joints || j >= num_joints {
                return Err(Error::invalid(format!(
                    "skeleton: edge {i}-{j} out of range for {num_joints} joints"
                )));
            }
            if i == j {
                return Err(Error::invalid(format!("skeleton: self-loop at joint {i}")));
            }
            let key = (i.min(j), i.max(j));
            if !seen.insert(key) {
                return Err(Error::invalid(format!(
                    "skeleton: duplicate edge {}-{}",
                    key.0, key.1
                )));
            }
        }
        let spec = SkeletonSpec {
            name: name.into(),
            num_joints,
            edges,
            center,
        };
        // Connectivity is required by every consumer (hop distances).
        spec.hop_distance()?;
        Ok(spec)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn num_joints(&self) -> usize {
        self.num_joints
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn center(&self) -> usize {
        self.center
    }

    pub fn is_tree(&self) -> bool {
        self.edges.len() + 1 == self.num_joints
    }

    pub fn neighbors(&self, joint: usize) -> Vec<usize> {
        let mut out = Vec::new();
        for &(i, j) in &self.edges {
            if i == joint {
                out.push(j);
            } else if j == joint {
                out.push(i);
            }
        }
        out.sort_unstable();
        out
    }

    /// Breadth-first hop count from every joint to the center joint.
    pub fn hop_distance(&self) -> Result<Vec<usize>> {
        let n = self.num_joints;
        let mut adj = vec![Vec::new(); n];
        for &(i, j) in &self.edges {
            adj[i].push(j);
            adj[j].push(i);
        }
        let mut dist = vec![usize::MAX; n];
        let mut queue = std::collections::VecDeque::new();
        dist[self.center] = 0;
        queue.push_back(self.center);
        while let Some(v) = queue.pop_front() {
            for &u in &adj[v] {
                if dist[u] == usize::MAX {
                    dist[u] = dist[v] + 1;
                    queue.push_back(u);
                }
            }
        }
        if let Some(v) = dist.iter().position(|&d| d == usize::MAX) {
            return Err(Error::invalid(format!(
                "skeleton '{}': joint {v} is not connected to center {}",
                self.name, self.center
            )));
        }
        Ok(dist)
    }

    /// Parent of each joint: its unique neighbor strictly closer to the
    /// center. The center has no parent. Errors when the graph is not a
    /// tree, since only trees give every joint a unique bone.
    pub fn parents(&self) -> Result<Vec<Option<usize>>> {
        if !self.is_tree() {
            return Err(Error::invalid(format!(
                "skeleton '{}': {} edges on {} joints contains a cycle; bone assignment needs a tree",
                self.name,
                self.edges.len(),
                self.num_joints
            )));
        }
        let hops = self.hop_distance()?;
        let mut parents = vec![None; self.num_joints];
        for v in 0..self.num_joints {
            if v == self.center {
                continue;
            }
            let closer: Vec<usize> = self
                .neighbors(v)
                .into_iter()
                .filter(|&u| hops[u] < hops[v])
                .collect();
            match closer.as_slice() {
                [p] => parents[v] = Some(*p),
                _ => {
                    return Err(Error::invalid(format!(
                        "skeleton '{}': joint {v} has {} strictly closer neighbors",
                        self.name,
                        closer.len()
                    )))
                }
            }
        }
        Ok(parents)
    }

    /// Parses the key-value skeleton file format:
    /// `n_joints = N`, `edges = i-j i-j ...`, `center = c`, optional
    /// `name = ...`. `#` starts a comment; edges may be separated by
    /// whitespace or commas.
    pub fn parse(text: &str, default_name: &str) -> Result<Self> {
        let mut name = default_name.to_string();
        let mut n_joints = None;
        let mut edges = None;
        let mut center = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::format(format!("skeleton file line {}: expected key = value", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "name" => name = value.to_string(),
                "n_joints" => {
                    n_joints = Some(value.parse::<usize>().map_err(|_| {
                        Error::format(format!("skeleton file: bad n_joints '{value}'"))
                    })?)
                }
                "center" => {
                    center = Some(value.parse::<usize>().map_err(|_| {
                        Error::format(format!("skeleton file: bad center '{value}'"))
                    })?)
                }
                "edges" => {
                    let mut list = Vec::new();
                    for tok in value.split(|c: char| c.is_whitespace() || c == ',') {
                        if tok.is_empty() {
                            continue;
                        }
                        let (a, b) = tok.split_once('-').ok_or_else(|| {
                            Error::format(format!("skeleton file: bad edge token '{tok}'"))
                        })?;
                        let a = a.trim().parse::<usize>();
                        let b = b.trim().parse::<usize>();
                        match (a, b) {
                            (Ok(a), Ok(b)) => list.push((a, b)),
                            _ => {
                                return Err(Error::format(format!(
                                    "skeleton file: bad edge token '{tok}'"
                                )))
                            }
                        }
                    }
                    edges = Some(list);
                }
                other => {
                    return Err(Error::format(format!(
                        "skeleton file: unknown key '{other}'"
                    )))
                }
            }
        }
        let n_joints =
            n_joints.ok_or_else(|| Error::format("skeleton file: missing n_joints"))?;
        let edges = edges.ok_or_else(|| Error::format("skeleton file: missing edges"))?;
        let center = center.ok_or_else(|| Error::format("skeleton file: missing center"))?;
        SkeletonSpec::new(name, n_joints, edges, center)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let default = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("skeleton");
        Self::parse(&text, default)
    }

    /// Serializes back to the key-value file format.
    pub fn to_text(&self) -> String {
        let edges: Vec<String> = self
            .edges
            .iter()
            .map(|&(i, j)| format!("{i}-{j}"))
            .collect();
        format!(
            "name = {}\nn_joints = {}\nedges = {}\ncenter = {}\n",
            self.name,
            self.num_joints,
            edges.join(" "),
            self.center
        )
    }
}

/// The three binary subset-membership matrices. Entry `(i, j)` of matrix k
/// is 1 iff vertex j belongs to subset k of vertex i.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionedAdjacency {
    pub matrices: [Tensor<f64>; NUM_SUBSETS],
    pub num_joints: usize,
}

/// The normalized stack `A_k = Λ_k^{-1/2} Ā_k Λ_k^{-1/2}` with
/// `Λ_k^{ii} = Σ_j Ā_k^{ij} + α`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    pub matrices: [Tensor<f64>; NUM_SUBSETS],
    pub alpha: f64,
    pub num_joints: usize,
}

/// Assigns each physical edge direction to a subset by hop distance:
/// strictly closer neighbors are centripetal, strictly farther ones
/// centrifugal, equal-hop neighbors join the root subset. The root subset
/// always contains the vertex itself.
pub fn build_partitions(spec: &SkeletonSpec) -> Result<PartitionedAdjacency> {
    let n = spec.num_joints();
    let hops = spec.hop_distance()?;
    let mut mats = [
        Tensor::<f64>::zeros(&[n, n]),
        Tensor::<f64>::zeros(&[n, n]),
        Tensor::<f64>::zeros(&[n, n]),
    ];
    for i in 0..n {
        mats[SUBSET_ROOT].set(&[i, i], 1.0);
    }
    for &(a, b) in spec.edges() {
        for (i, j) in [(a, b), (b, a)] {
            let k = match hops[j].cmp(&hops[i]) {
                std::cmp::Ordering::Less => SUBSET_CENTRIPETAL,
                std::cmp::Ordering::Greater => SUBSET_CENTRIFUGAL,
                std::cmp::Ordering::Equal => SUBSET_ROOT,
            };
            mats[k].set(&[i, j], 1.0);
        }
    }
    Ok(PartitionedAdjacency {
        matrices: mats,
        num_joints: n,
    })
}

/// Symmetric degree normalization with the `α` regularizer. `Λ_k` is built
/// from row sums, so `A_k` is zero exactly where `Ā_k` is zero and every
/// entry stays finite.
pub fn normalize(pa: &PartitionedAdjacency, alpha: f64) -> Result<NormalizedAdjacency> {
    if alpha <= 0.0 {
        return Err(Error::invalid(format!(
            "normalize: alpha must be positive, got {alpha}"
        )));
    }
    let n = pa.num_joints;
    let mut out = pa.matrices.clone();
    for mat in &mut out {
        let mut lambda = vec![0.0f64; n];
        for i in 0..n {
            let mut s = 0.0;
            for j in 0..n {
                s += mat.at(&[i, j]);
            }
            lambda[i] = s + alpha;
        }
        let inv_sqrt: Vec<f64> = lambda.iter().map(|&d| 1.0 / d.sqrt()).collect();
        for i in 0..n {
            for j in 0..n {
                let v = mat.at(&[i, j]);
                if v != 0.0 {
                    mat.set(&[i, j], inv_sqrt[i] * v * inv_sqrt[j]);
                }
            }
        }
    }
    Ok(NormalizedAdjacency {
        matrices: out,
        alpha,
        num_joints: n,
    })
}

const TOY9_TEXT: &str = include_str!("../specs/toy9.skel");
const NTU25_TEXT: &str = include_str!("../specs/ntu25.skel");
const KINETICS18_TEXT: &str = include_str!("../specs/kinetics18.skel");

/// Built-in skeletons: the 25-joint depth-sensor body, the 18-joint pose
/// estimator layout, and the 9-joint toy body used by desk-scale tests.
pub fn builtin_specs() -> Vec<SkeletonSpec> {
    vec![
        builtin("toy9").unwrap(),
        builtin("ntu25").unwrap(),
        builtin("kinetics18").unwrap(),
    ]
}

pub fn builtin(name: &str) -> Result<SkeletonSpec> {
    let text = match name {
        "toy9" => TOY9_TEXT,
        "ntu25" => NTU25_TEXT,
        "kinetics18" => KINETICS18_TEXT,
        other => {
            return Err(Error::invalid(format!(
                "unknown builtin skeleton '{other}' (have toy9, ntu25, kinetics18)"
            )))
        }
    };
    SkeletonSpec::parse(text, name)
}

/// Resolves a skeleton by builtin name first, then as a file path.
pub fn resolve_spec(name_or_path: &str) -> Result<SkeletonSpec> {
    match builtin(name_or_path) {
        Ok(spec) => Ok(spec),
        Err(_) if Path::new(name_or_path).exists() => SkeletonSpec::load(Path::new(name_or_path)),
        Err(e) => Err(e),
    }
}
