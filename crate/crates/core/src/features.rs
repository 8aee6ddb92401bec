//! Cluster-based feature engineering.
//!
//! Items (entities or relations) are described by sparse co-occurrence
//! counts, optionally kernelized, then clustered. A fine-tuner searches a
//! grid of (method, kernel, K) and keeps the setting whose cluster centers
//! are most spread out. The chosen clustering is then used to fold each
//! item's raw counts into a K-length vector, which becomes the frozen
//! diagonal weight row for that item.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{derive_seed, FeatureScale};
use crate::error::{Error, Result};
use crate::kg::{check_id, KnowledgeGraph};
use crate::par;

/// Sparse vector of non-negative integer counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseFeatureVector {
    indices: Vec<u32>,
    values: Vec<u32>,
    len: usize,
}

impl SparseFeatureVector {
    /// Builds a vector from `(index, count)` pairs. Duplicate indices are
    /// summed and zero counts dropped.
    pub fn from_pairs(len: usize, pairs: impl IntoIterator<Item = (u32, u32)>) -> Result<Self> {
        let mut acc: BTreeMap<u32, u32> = BTreeMap::new();
        for (i, v) in pairs {
            check_id("feature index", i as usize, len)?;
            *acc.entry(i).or_insert(0) += v;
        }
        let (indices, values) = acc.into_iter().filter(|&(_, v)| v > 0).unzip();
        Ok(Self {
            indices,
            values,
            len,
        })
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            indices: Vec::new(),
            values: Vec::new(),
            len,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn values(&self) -> &[u32] {
        &self.values
    }

    pub fn get(&self, i: usize) -> u32 {
        match self.indices.binary_search(&(i as u32)) {
            Ok(p) => self.values[p],
            Err(_) => 0,
        }
    }

    pub fn sum(&self) -> u64 {
        self.values.iter().map(|&v| v as u64).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, u32)> + '_ {
        self.indices
            .iter()
            .zip(&self.values)
            .map(|(&i, &v)| (i as usize, v))
    }

    pub fn sq_norm(&self) -> f64 {
        self.values.iter().map(|&v| (v as f64) * (v as f64)).sum()
    }

    pub fn dot(&self, other: &Self) -> f64 {
        let (mut a, mut b) = (0, 0);
        let mut acc = 0.0;
        while a < self.indices.len() && b < other.indices.len() {
            match self.indices[a].cmp(&other.indices[b]) {
                std::cmp::Ordering::Less => a += 1,
                std::cmp::Ordering::Greater => b += 1,
                std::cmp::Ordering::Equal => {
                    acc += self.values[a] as f64 * other.values[b] as f64;
                    a += 1;
                    b += 1;
                }
            }
        }
        acc
    }

    pub fn dot_dense(&self, dense: &[f64]) -> f64 {
        self.iter().map(|(i, v)| v as f64 * dense[i]).sum()
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.len];
        for (i, v) in self.iter() {
            out[i] = v as f64;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Item {
    Entity(u32),
    Relation(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ItemKind {
    Entity,
    Relation,
}

/// Raw co-occurrence counts of one item over the training split.
///
/// Entity layout: `[relation counts (n_r)] ++ [entity counts (n_e)]`.
/// Relation layout: entity counts (n_e), either role. A self-loop triple
/// counts once per slot.
pub fn cooccurrence_vector(item: Item, kg: &KnowledgeGraph) -> Result<SparseFeatureVector> {
    let (n_e, n_r) = (kg.n_entities(), kg.n_relations());
    match item {
        Item::Entity(e) => {
            check_id("entity", e as usize, n_e)?;
            let mut pairs = Vec::new();
            for t in kg.train.iter().filter(|t| t.head == e || t.tail == e) {
                let other = if t.head == e { t.tail } else { t.head };
                pairs.push((t.relation, 1));
                pairs.push((n_r as u32 + other, 1));
            }
            SparseFeatureVector::from_pairs(n_r + n_e, pairs)
        }
        Item::Relation(r) => {
            check_id("relation", r as usize, n_r)?;
            let mut pairs = Vec::new();
            for t in kg.train.iter().filter(|t| t.relation == r) {
                pairs.push((t.head, 1));
                if t.tail != t.head {
                    pairs.push((t.tail, 1));
                }
            }
            SparseFeatureVector::from_pairs(n_e, pairs)
        }
    }
}

/// Co-occurrence vectors for every item of one kind, in id order.
pub fn cooccurrence_vectors(kind: ItemKind, kg: &KnowledgeGraph) -> Vec<SparseFeatureVector> {
    let (n_e, n_r) = (kg.n_entities(), kg.n_relations());
    let n_items = match kind {
        ItemKind::Entity => n_e,
        ItemKind::Relation => n_r,
    };
    let mut pairs: Vec<Vec<(u32, u32)>> = vec![Vec::new(); n_items];
    for t in &kg.train {
        match kind {
            ItemKind::Entity => {
                pairs[t.head as usize].push((t.relation, 1));
                pairs[t.head as usize].push((n_r as u32 + t.tail, 1));
                if t.tail != t.head {
                    pairs[t.tail as usize].push((t.relation, 1));
                    pairs[t.tail as usize].push((n_r as u32 + t.head, 1));
                }
            }
            ItemKind::Relation => {
                pairs[t.relation as usize].push((t.head, 1));
                if t.tail != t.head {
                    pairs[t.relation as usize].push((t.tail, 1));
                }
            }
        }
    }
    let len = match kind {
        ItemKind::Entity => n_r + n_e,
        ItemKind::Relation => n_e,
    };
    pairs
        .into_iter()
        .map(|p| SparseFeatureVector::from_pairs(len, p).expect("indices in range"))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    /// `exp(-|x - y|^2)`
    Rbf,
    /// `1 / (1 + exp(-x.y))`
    Sigmoid,
    /// `x.y + 1`
    Polynomial,
    /// `x.y`
    Linear,
    /// `x.y / (|x| |y|)`, 0 when either vector is zero.
    Cosine,
    /// Mutual k-nearest-neighbour adjacency (1 on the diagonal).
    MutualKnn,
}

impl Kernel {
    pub const PAPER_GRID: [Kernel; 5] = [
        Kernel::Rbf,
        Kernel::Sigmoid,
        Kernel::Polynomial,
        Kernel::Linear,
        Kernel::Cosine,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Kernel::Rbf => "rbf",
            Kernel::Sigmoid => "sigmoid",
            Kernel::Polynomial => "polynomial",
            Kernel::Linear => "linear",
            Kernel::Cosine => "cosine",
            Kernel::MutualKnn => "knn",
        }
    }
}

/// Parses a kernel name; `none` means cluster the raw features.
pub fn parse_kernel(s: &str) -> Result<Option<Kernel>> {
    Ok(Some(match s.trim().to_ascii_lowercase().as_str() {
        "none" | "identity" => return Ok(None),
        "rbf" => Kernel::Rbf,
        "sigmoid" => Kernel::Sigmoid,
        "polynomial" | "poly" => Kernel::Polynomial,
        "linear" => Kernel::Linear,
        "cosine" => Kernel::Cosine,
        "knn" | "nn" => Kernel::MutualKnn,
        other => return Err(Error::Config(format!("unknown kernel '{other}'"))),
    }))
}

pub fn kernel_name(k: Option<Kernel>) -> &'static str {
    k.map(Kernel::name).unwrap_or("none")
}

/// Neighbour count used by the mutual-kNN kernel and the kNN-graph method.
const KNN_NEIGHBOURS: usize = 10;

/// Kernel matrix over the rows of a dense feature matrix.
pub fn kernel_matrix(x: ArrayView2<'_, f64>, kernel: Kernel) -> Result<Array2<f64>> {
    let gram = x.dot(&x.t());
    Ok(kernel_from_gram(&gram, kernel))
}

/// Kernel matrix over sparse rows. All rows must share one length.
pub fn kernel_matrix_sparse(rows: &[SparseFeatureVector], kernel: Kernel) -> Result<Array2<f64>> {
    Ok(kernel_from_gram(&sparse_gram(rows)?, kernel))
}

fn sparse_gram(rows: &[SparseFeatureVector]) -> Result<Array2<f64>> {
    if let Some(first) = rows.first() {
        if let Some(bad) = rows.iter().find(|r| r.len() != first.len()) {
            return Err(Error::Dimension(format!(
                "feature vectors of length {} and {}",
                first.len(),
                bad.len()
            )));
        }
    }
    let n = rows.len();
    let mut gram = Array2::<f64>::zeros((n, n));
    if let Some(data) = gram.as_slice_mut() {
        par::for_each_row_mut(data, n, |i, row| {
            for (j, out) in row.iter_mut().enumerate() {
                *out = rows[i].dot(&rows[j]);
            }
        });
    }
    Ok(gram)
}

fn kernel_from_gram(gram: &Array2<f64>, kernel: Kernel) -> Array2<f64> {
    let n = gram.nrows();
    let diag: Vec<f64> = (0..n).map(|i| gram[[i, i]]).collect();
    if kernel == Kernel::MutualKnn {
        return mutual_knn_from_gram(gram, &diag);
    }
    let mut out = Array2::<f64>::zeros((n, n));
    if let Some(data) = out.as_slice_mut() {
        par::for_each_row_mut(data, n, |i, row| {
            for (j, o) in row.iter_mut().enumerate() {
                let g = gram[[i, j]];
                *o = match kernel {
                    Kernel::Rbf => {
                        let d2 = (diag[i] + diag[j] - 2.0 * g).max(0.0);
                        if i == j {
                            1.0
                        } else {
                            (-d2).exp()
                        }
                    }
                    Kernel::Sigmoid => sigmoid(g),
                    Kernel::Polynomial => g + 1.0,
                    Kernel::Linear => g,
                    Kernel::Cosine => {
                        let denom = (diag[i] * diag[j]).sqrt();
                        if denom > 0.0 {
                            g / denom
                        } else {
                            0.0
                        }
                    }
                    Kernel::MutualKnn => unreachable!(),
                };
            }
        });
    }
    out
}

fn mutual_knn_from_gram(gram: &Array2<f64>, diag: &[f64]) -> Array2<f64> {
    let n = gram.nrows();
    let k = KNN_NEIGHBOURS.min(n.saturating_sub(1));
    let neighbours: Vec<Vec<usize>> = par::map_range(n, |i| {
        let mut d: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| ((diag[i] + diag[j] - 2.0 * gram[[i, j]]).max(0.0), j))
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut nn: Vec<usize> = d.into_iter().take(k).map(|(_, j)| j).collect();
        nn.sort_unstable();
        nn
    });
    let mut out = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        out[[i, i]] = 1.0;
        for &j in &neighbours[i] {
            if neighbours[j].binary_search(&i).is_ok() {
                out[[i, j]] = 1.0;
            }
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Access pattern shared by dense and sparse point collections.
pub trait PointSet: Sync {
    fn n(&self) -> usize;
    fn dim(&self) -> usize;
    /// Squared distance from point `i` to `center`, whose squared norm is `center_sq`.
    fn sq_dist(&self, i: usize, center: &[f64], center_sq: f64) -> f64;
    /// `acc += weight * x_i`
    fn add_to(&self, i: usize, weight: f64, acc: &mut [f64]);
    fn dot(&self, i: usize, j: usize) -> f64;
}

pub struct DenseRows<'a>(pub ArrayView2<'a, f64>);

impl PointSet for DenseRows<'_> {
    fn n(&self) -> usize {
        self.0.nrows()
    }

    fn dim(&self) -> usize {
        self.0.ncols()
    }

    fn sq_dist(&self, i: usize, center: &[f64], _center_sq: f64) -> f64 {
        self.0
            .row(i)
            .iter()
            .zip(center)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    fn add_to(&self, i: usize, weight: f64, acc: &mut [f64]) {
        for (a, x) in acc.iter_mut().zip(self.0.row(i)) {
            *a += weight * x;
        }
    }

    fn dot(&self, i: usize, j: usize) -> f64 {
        self.0.row(i).dot(&self.0.row(j))
    }
}

pub struct SparseRows<'a> {
    rows: &'a [SparseFeatureVector],
    norms: Vec<f64>,
    dim: usize,
}

impl<'a> SparseRows<'a> {
    pub fn new(rows: &'a [SparseFeatureVector]) -> Result<Self> {
        let dim = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Dimension("sparse rows of differing length".into()));
        }
        Ok(Self {
            rows,
            norms: rows.iter().map(|r| r.sq_norm()).collect(),
            dim,
        })
    }
}

impl PointSet for SparseRows<'_> {
    fn n(&self) -> usize {
        self.rows.len()
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn sq_dist(&self, i: usize, center: &[f64], center_sq: f64) -> f64 {
        (self.norms[i] - 2.0 * self.rows[i].dot_dense(center) + center_sq).max(0.0)
    }

    fn add_to(&self, i: usize, weight: f64, acc: &mut [f64]) {
        for (j, v) in self.rows[i].iter() {
            acc[j] += weight * v as f64;
        }
    }

    fn dot(&self, i: usize, j: usize) -> f64 {
        self.rows[i].dot(&self.rows[j])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterMethod {
    KMeans,
    SpectralKMeans,
    FuzzyCMeans,
    KnnGraph,
}

impl ClusterMethod {
    pub const ALL: [ClusterMethod; 4] = [
        ClusterMethod::SpectralKMeans,
        ClusterMethod::KMeans,
        ClusterMethod::FuzzyCMeans,
        ClusterMethod::KnnGraph,
    ];
}

impl fmt::Display for ClusterMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClusterMethod::KMeans => "kmeans",
            ClusterMethod::SpectralKMeans => "spectral_kmeans",
            ClusterMethod::FuzzyCMeans => "fuzzy_cmeans",
            ClusterMethod::KnnGraph => "knn_graph",
        })
    }
}

impl FromStr for ClusterMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "kmeans" => Ok(ClusterMethod::KMeans),
            "spectral" | "spectral_kmeans" => Ok(ClusterMethod::SpectralKMeans),
            "fcm" | "fuzzy" | "fuzzy_cmeans" => Ok(ClusterMethod::FuzzyCMeans),
            "knn" | "knn_graph" => Ok(ClusterMethod::KnnGraph),
            other => Err(Error::Config(format!(
                "unknown clustering method '{other}'"
            ))),
        }
    }
}

/// A fitted hard clustering.
#[derive(Debug, Clone)]
pub struct ClusterModel {
    pub method: ClusterMethod,
    pub kernel: Option<Kernel>,
    pub k: usize,
    /// Cluster means in the clustered (possibly kernelized) feature space.
    pub centers: Array2<f64>,
    pub assignment: Vec<u32>,
    pub center_variance: f64,
    /// k-means objective after each assignment step (k-means only).
    pub objective_trace: Vec<f64>,
}

impl ClusterModel {
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &c in &self.assignment {
            sizes[c as usize] += 1;
        }
        sizes
    }
}

/// Summed per-dimension population variance of the center vectors.
pub fn center_variance(centers: ArrayView2<'_, f64>) -> f64 {
    let k = centers.nrows();
    if k == 0 {
        return 0.0;
    }
    let mean = centers.mean_axis(Axis(0)).expect("non-empty");
    let mut total = 0.0;
    for row in centers.rows() {
        for (x, m) in row.iter().zip(mean.iter()) {
            total += (x - m) * (x - m);
        }
    }
    total / k as f64
}

#[derive(Debug, Clone, Copy)]
pub struct KMeansOptions {
    pub max_iter: usize,
    /// Relative center movement below which iteration stops.
    pub tol: f64,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            max_iter: 300,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub centers: Array2<f64>,
    pub assignment: Vec<u32>,
    pub objective: Vec<f64>,
    pub iterations: usize,
}

fn row_sq(c: &[f64]) -> f64 {
    c.iter().map(|x| x * x).sum()
}

/// Deterministic farthest-point seeding: the first center is drawn from
/// `rng`, each further one is the point farthest from the chosen set.
fn farthest_point_seeds<P: PointSet>(points: &P, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = points.n();
    let mut chosen = Vec::with_capacity(k);
    let mut taken = vec![false; n];
    let first = rng.gen_range(0..n);
    chosen.push(first);
    taken[first] = true;
    let mut center = vec![0.0; points.dim()];
    points.add_to(first, 1.0, &mut center);
    let mut min_d2: Vec<f64> = {
        let csq = row_sq(&center);
        par::map_range(n, |i| points.sq_dist(i, &center, csq))
    };
    while chosen.len() < k {
        let mut best: Option<usize> = None;
        for i in 0..n {
            if taken[i] {
                continue;
            }
            match best {
                None => best = Some(i),
                Some(b) if min_d2[i] > min_d2[b] => best = Some(i),
                _ => {}
            }
        }
        let next = best.expect("k <= n");
        chosen.push(next);
        taken[next] = true;
        center.iter_mut().for_each(|x| *x = 0.0);
        points.add_to(next, 1.0, &mut center);
        let csq = row_sq(&center);
        let d2 = par::map_range(n, |i| points.sq_dist(i, &center, csq));
        for (m, d) in min_d2.iter_mut().zip(d2) {
            *m = m.min(d);
        }
    }
    chosen
}

fn assign<P: PointSet>(points: &P, centers: &Array2<f64>) -> (Vec<u32>, Vec<f64>) {
    let sq: Vec<f64> = centers.rows().into_iter().map(|r| r.dot(&r)).collect();
    let rows: Vec<Vec<f64>> = centers.rows().into_iter().map(|r| r.to_vec()).collect();
    let res = par::map_range(points.n(), |i| {
        let mut best = (f64::INFINITY, 0u32);
        for (c, row) in rows.iter().enumerate() {
            let d = points.sq_dist(i, row, sq[c]);
            if d < best.0 {
                best = (d, c as u32);
            }
        }
        best
    });
    res.into_iter().map(|(d, c)| (c, d)).unzip()
}

fn cluster_means<P: PointSet>(
    points: &P,
    assignment: &[u32],
    k: usize,
    previous: Option<&Array2<f64>>,
) -> Array2<f64> {
    let d = points.dim();
    let mut sums = Array2::<f64>::zeros((k, d));
    let mut counts = vec![0usize; k];
    for (i, &c) in assignment.iter().enumerate() {
        let c = c as usize;
        counts[c] += 1;
        points.add_to(
            i,
            1.0,
            sums.row_mut(c).into_slice().expect("standard layout"),
        );
    }
    for c in 0..k {
        if counts[c] > 0 {
            sums.row_mut(c).mapv_inplace(|x| x / counts[c] as f64);
        } else if let Some(prev) = previous {
            sums.row_mut(c).assign(&prev.row(c));
        }
    }
    sums
}

/// Moves points into empty clusters, taking each time the point farthest
/// from its own center among clusters with at least two members. Centers
/// are recomputed as cluster means afterwards.
fn repair_empty<P: PointSet>(points: &P, assignment: &mut [u32], centers: &mut Array2<f64>) {
    let k = centers.nrows();
    loop {
        let mut sizes = vec![0usize; k];
        for &c in assignment.iter() {
            sizes[c as usize] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            break;
        };
        let sq: Vec<f64> = centers.rows().into_iter().map(|r| r.dot(&r)).collect();
        let mut best: Option<(f64, usize)> = None;
        for (i, &c) in assignment.iter().enumerate() {
            if sizes[c as usize] < 2 {
                continue;
            }
            let row = centers.row(c as usize).to_vec();
            let d = points.sq_dist(i, &row, sq[c as usize]);
            if best.is_none_or(|(bd, _)| d > bd) {
                best = Some((d, i));
            }
        }
        let (_, idx) = best.expect("some cluster has two members when k <= n");
        let old = assignment[idx] as usize;
        assignment[idx] = empty as u32;
        let mut row = vec![0.0; points.dim()];
        points.add_to(idx, 1.0, &mut row);
        centers.row_mut(empty).assign(&Array1::from(row));
        let fresh = cluster_means(points, assignment, k, Some(centers));
        centers.row_mut(old).assign(&fresh.row(old));
    }
}

/// Lloyd's algorithm with farthest-point seeding and empty-cluster re-seeding.
pub fn kmeans<P: PointSet>(
    points: &P,
    k: usize,
    seed: u64,
    opts: KMeansOptions,
) -> Result<KMeansFit> {
    let n = points.n();
    if k == 0 || k > n {
        return Err(Error::Parameter(format!("k = {k} must be in 1..={n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds = farthest_point_seeds(points, k, &mut rng);
    let mut centers = Array2::<f64>::zeros((k, points.dim()));
    for (c, &i) in seeds.iter().enumerate() {
        points.add_to(
            i,
            1.0,
            centers.row_mut(c).into_slice().expect("standard layout"),
        );
    }
    let mut objective = Vec::new();
    let mut assignment = vec![0u32; n];
    let mut iterations = 0;
    for _ in 0..opts.max_iter {
        iterations += 1;
        let (a, d) = assign(points, &centers);
        assignment = a;
        objective.push(d.iter().sum());
        let mut next = cluster_means(points, &assignment, k, Some(&centers));
        repair_empty(points, &mut assignment, &mut next);
        let moved: f64 = (&next - &centers).iter().map(|x| x * x).sum();
        let scale: f64 = next
            .iter()
            .map(|x| x * x)
            .sum::<f64>()
            .max(f64::MIN_POSITIVE);
        centers = next;
        if moved <= opts.tol * opts.tol * scale {
            break;
        }
    }
    let (a, d) = assign(points, &centers);
    if a != assignment {
        assignment = a;
        objective.push(d.iter().sum());
        centers = cluster_means(points, &assignment, k, Some(&centers));
    }
    repair_empty(points, &mut assignment, &mut centers);
    Ok(KMeansFit {
        centers,
        assignment,
        objective,
        iterations,
    })
}

fn fuzzy_cmeans<P: PointSet>(points: &P, k: usize, seed: u64) -> Vec<u32> {
    const FUZZINESS: f64 = 2.0;
    const MAX_ITER: usize = 300;
    const TOL: f64 = 1e-6;
    let n = points.n();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds = farthest_point_seeds(points, k, &mut rng);
    let mut centers: Vec<Vec<f64>> = seeds
        .iter()
        .map(|&i| {
            let mut row = vec![0.0; points.dim()];
            points.add_to(i, 1.0, &mut row);
            row
        })
        .collect();
    let mut memberships: Vec<Vec<f64>> = vec![vec![0.0; k]; n];
    let exponent = 1.0 / (FUZZINESS - 1.0);
    for _ in 0..MAX_ITER {
        let sq: Vec<f64> = centers.iter().map(|c| row_sq(c)).collect();
        let next: Vec<Vec<f64>> = par::map_range(n, |i| {
            let d2: Vec<f64> = (0..k)
                .map(|c| points.sq_dist(i, &centers[c], sq[c]))
                .collect();
            let mut u = vec![0.0; k];
            if let Some(z) = d2.iter().position(|&d| d <= 0.0) {
                u[z] = 1.0;
                return u;
            }
            for c in 0..k {
                let s: f64 = d2.iter().map(|&dj| (d2[c] / dj).powf(exponent)).sum();
                u[c] = 1.0 / s;
            }
            u
        });
        let change = next
            .iter()
            .zip(&memberships)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max);
        memberships = next;
        for (c, center) in centers.iter_mut().enumerate() {
            let mut acc = vec![0.0; points.dim()];
            let mut wsum = 0.0;
            for (i, u) in memberships.iter().enumerate() {
                let w = u[c].powf(FUZZINESS);
                if w > 0.0 {
                    points.add_to(i, w, &mut acc);
                    wsum += w;
                }
            }
            if wsum > 0.0 {
                *center = acc.into_iter().map(|x| x / wsum).collect();
            }
        }
        if change < TOL {
            break;
        }
    }
    memberships
        .iter()
        .map(|u| {
            let mut best = 0;
            for c in 1..k {
                if u[c] > u[best] {
                    best = c;
                }
            }
            best as u32
        })
        .collect()
}

fn modified_gram_schmidt(q: &mut Array2<f64>) {
    let cols = q.ncols();
    for j in 0..cols {
        for p in 0..j {
            let proj = q.column(p).dot(&q.column(j));
            let prev = q.column(p).to_owned();
            q.column_mut(j).scaled_add(-proj, &prev);
        }
        let norm = q.column(j).dot(&q.column(j)).sqrt();
        if norm > 1e-300 {
            q.column_mut(j).mapv_inplace(|x| x / norm);
        }
    }
}

/// Normalized spectral embedding: the top-`k` eigenvectors of
/// `D^-1/2 A D^-1/2`, found by subspace iteration, rows scaled to unit norm.
fn spectral_embedding(affinity: &Array2<f64>, k: usize, seed: u64) -> Array2<f64> {
    const ITERATIONS: usize = 200;
    let n = affinity.nrows();
    let a = affinity.mapv(|x| x.max(0.0));
    let dinv: Array1<f64> = a
        .sum_axis(Axis(1))
        .mapv(|d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 });
    let mut s = a;
    for i in 0..n {
        for j in 0..n {
            s[[i, j]] *= dinv[i] * dinv[j];
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q = Array2::from_shape_fn((n, k), |_| rng.gen_range(-1.0..1.0));
    modified_gram_schmidt(&mut q);
    for _ in 0..ITERATIONS {
        // shift by I so all eigenvalues are non-negative
        let mut y = s.dot(&q);
        y += &q;
        modified_gram_schmidt(&mut y);
        q = y;
    }
    for mut row in q.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row.mapv_inplace(|x| x / norm);
        }
    }
    q
}

fn affinity_from_points<P: PointSet>(points: &P) -> Array2<f64> {
    let n = points.n();
    let norms: Vec<f64> = (0..n).map(|i| points.dot(i, i).sqrt()).collect();
    let mut out = Array2::<f64>::zeros((n, n));
    if let Some(data) = out.as_slice_mut() {
        par::for_each_row_mut(data, n, |i, row| {
            for (j, o) in row.iter_mut().enumerate() {
                let denom = norms[i] * norms[j];
                *o = if denom > 0.0 {
                    points.dot(i, j) / denom
                } else {
                    0.0
                };
            }
        });
    }
    out
}

fn union_find_root(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Connected components of the mutual-kNN graph, merged or split until
/// exactly `k` groups remain.
fn knn_graph_clusters<P: PointSet>(points: &P, k: usize, seed: u64) -> Result<Vec<u32>> {
    let n = points.n();
    let nn = KNN_NEIGHBOURS.min(n.saturating_sub(1));
    let norms: Vec<f64> = (0..n).map(|i| points.dot(i, i)).collect();
    let neighbours: Vec<Vec<usize>> = par::map_range(n, |i| {
        let mut d: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| ((norms[i] + norms[j] - 2.0 * points.dot(i, j)).max(0.0), j))
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut v: Vec<usize> = d.into_iter().take(nn).map(|(_, j)| j).collect();
        v.sort_unstable();
        v
    });
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for &j in &neighbours[i] {
            if j > i && neighbours[j].binary_search(&i).is_ok() {
                let (ri, rj) = (
                    union_find_root(&mut parent, i),
                    union_find_root(&mut parent, j),
                );
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let r = union_find_root(&mut parent, i);
        groups.entry(r).or_default().push(i);
    }
    let mut comps: Vec<Vec<usize>> = groups.into_values().collect();

    let centroid = |members: &[usize]| {
        let mut c = vec![0.0; points.dim()];
        for &m in members {
            points.add_to(m, 1.0 / members.len() as f64, &mut c);
        }
        c
    };
    while comps.len() > k {
        let (small, _) = comps
            .iter()
            .enumerate()
            .min_by_key(|(i, c)| (c.len(), *i))
            .expect("non-empty");
        let members = comps.remove(small);
        let c = centroid(&members);
        let csq = row_sq(&c);
        let target = comps
            .iter()
            .enumerate()
            .map(|(i, other)| {
                let oc = centroid(other);
                let d: f64 = oc.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum();
                let _ = csq;
                (d, i)
            })
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
            .map(|(_, i)| i)
            .expect("at least one component left");
        comps[target].extend(members);
        comps[target].sort_unstable();
    }
    let mut split_round = 0u64;
    while comps.len() < k {
        let (big, _) = comps
            .iter()
            .enumerate()
            .max_by_key(|(i, c)| (c.len(), std::cmp::Reverse(*i)))
            .expect("non-empty");
        let members = comps.remove(big);
        let sub = SubsetPoints {
            inner: points,
            members: &members,
        };
        let fit = kmeans(&sub, 2, seed ^ split_round, KMeansOptions::default())?;
        split_round += 1;
        let (a, b): (Vec<(&usize, &u32)>, Vec<(&usize, &u32)>) = members
            .iter()
            .zip(&fit.assignment)
            .partition(|(_, &c)| c == 0);
        comps.push(a.into_iter().map(|(&m, _)| m).collect());
        comps.push(b.into_iter().map(|(&m, _)| m).collect());
    }
    let mut assignment = vec![0u32; n];
    for (c, members) in comps.iter().enumerate() {
        for &m in members {
            assignment[m] = c as u32;
        }
    }
    Ok(assignment)
}

struct SubsetPoints<'a, P: PointSet> {
    inner: &'a P,
    members: &'a [usize],
}

impl<P: PointSet> PointSet for SubsetPoints<'_, P> {
    fn n(&self) -> usize {
        self.members.len()
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn sq_dist(&self, i: usize, center: &[f64], center_sq: f64) -> f64 {
        self.inner.sq_dist(self.members[i], center, center_sq)
    }

    fn add_to(&self, i: usize, weight: f64, acc: &mut [f64]) {
        self.inner.add_to(self.members[i], weight, acc)
    }

    fn dot(&self, i: usize, j: usize) -> f64 {
        self.inner.dot(self.members[i], self.members[j])
    }
}

/// Feature rows handed to the clustering routines.
#[derive(Clone, Copy)]
pub enum FeatureData<'a> {
    Sparse(&'a [SparseFeatureVector]),
    Dense(ArrayView2<'a, f64>),
}

impl FeatureData<'_> {
    pub fn n_items(&self) -> usize {
        match self {
            FeatureData::Sparse(r) => r.len(),
            FeatureData::Dense(x) => x.nrows(),
        }
    }

    fn kernel_matrix(&self, kernel: Kernel) -> Result<Array2<f64>> {
        match self {
            FeatureData::Sparse(r) => kernel_matrix_sparse(r, kernel),
            FeatureData::Dense(x) => kernel_matrix(*x, kernel),
        }
    }
}

/// Fits one clustering. Kernelized variants cluster the rows of the kernel
/// matrix; `kernel = None` clusters the raw features.
pub fn fit_clusters(
    data: FeatureData<'_>,
    method: ClusterMethod,
    kernel: Option<Kernel>,
    k: usize,
    seed: u64,
) -> Result<ClusterModel> {
    let n = data.n_items();
    if k == 0 || k > n {
        return Err(Error::Parameter(format!(
            "cluster count {k} must be in 1..={n}"
        )));
    }
    match kernel {
        Some(kernel) => {
            let km = data.kernel_matrix(kernel)?;
            fit_points(
                &DenseRows(km.view()),
                method,
                Some(kernel),
                Some(&km),
                k,
                seed,
            )
        }
        None => match data {
            FeatureData::Sparse(rows) => {
                fit_points(&SparseRows::new(rows)?, method, None, None, k, seed)
            }
            FeatureData::Dense(x) => fit_points(&DenseRows(x), method, None, None, k, seed),
        },
    }
}

fn fit_points<P: PointSet>(
    points: &P,
    method: ClusterMethod,
    kernel: Option<Kernel>,
    affinity: Option<&Array2<f64>>,
    k: usize,
    seed: u64,
) -> Result<ClusterModel> {
    let mut objective_trace = Vec::new();
    let mut assignment = match method {
        ClusterMethod::KMeans => {
            let fit = kmeans(points, k, seed, KMeansOptions::default())?;
            objective_trace = fit.objective;
            fit.assignment
        }
        ClusterMethod::SpectralKMeans => {
            let owned;
            let aff = match affinity {
                Some(a) => a,
                None => {
                    owned = affinity_from_points(points);
                    &owned
                }
            };
            let emb = spectral_embedding(aff, k, seed);
            kmeans(&DenseRows(emb.view()), k, seed, KMeansOptions::default())?.assignment
        }
        ClusterMethod::FuzzyCMeans => fuzzy_cmeans(points, k, seed),
        ClusterMethod::KnnGraph => knn_graph_clusters(points, k, seed)?,
    };
    let mut centers = cluster_means(points, &assignment, k, None);
    repair_empty(points, &mut assignment, &mut centers);
    let centers = cluster_means(points, &assignment, k, Some(&centers));
    let center_variance = center_variance(centers.view());
    Ok(ClusterModel {
        method,
        kernel,
        k,
        centers,
        assignment,
        center_variance,
        objective_trace,
    })
}

/// Search space of the fine-tuner.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub methods: Vec<ClusterMethod>,
    pub kernels: Vec<Option<Kernel>>,
    pub ks: Vec<usize>,
}

impl Grid {
    pub fn single(method: ClusterMethod, kernel: Option<Kernel>, k: usize) -> Self {
        Self {
            methods: vec![method],
            kernels: vec![kernel],
            ks: vec![k],
        }
    }

    fn paper(ks: &[usize]) -> Self {
        Self {
            methods: ClusterMethod::ALL.to_vec(),
            kernels: Kernel::PAPER_GRID.iter().copied().map(Some).collect(),
            ks: ks.to_vec(),
        }
    }

    /// 4 methods x 5 kernels x K in {50, 100, 200, 400}.
    pub fn paper_entity() -> Self {
        Self::paper(&[50, 100, 200, 400])
    }

    /// 4 methods x 5 kernels x K in {50, 75, 150, 300}.
    pub fn paper_relation() -> Self {
        Self::paper(&[50, 75, 150, 300])
    }

    pub fn len(&self) -> usize {
        self.methods.len() * self.kernels.len() * self.ks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridRow {
    pub method: ClusterMethod,
    pub kernel: Option<Kernel>,
    pub k: usize,
    /// `None` when the point was skipped (K larger than the item count).
    pub center_variance: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FinetuneResult {
    pub model: ClusterModel,
    pub rows: Vec<GridRow>,
}

fn grid_seed(seed: u64, method: ClusterMethod, kernel: Option<Kernel>, k: usize) -> u64 {
    derive_seed(
        seed,
        &format!("cluster/{method}/{}/{k}", kernel_name(kernel)),
    )
}

/// Exhaustive grid search keeping the setting with the largest center
/// variance. Ties keep the earlier grid point.
pub fn finetune(data: FeatureData<'_>, grid: &Grid, seed: u64) -> Result<FinetuneResult> {
    let n = data.n_items();
    let mut rows = Vec::with_capacity(grid.len());
    let mut best: Option<ClusterModel> = None;
    for &kernel in &grid.kernels {
        let km = match kernel {
            Some(kern) if grid.ks.iter().any(|&k| k >= 1 && k <= n) => {
                Some(data.kernel_matrix(kern)?)
            }
            _ => None,
        };
        for &method in &grid.methods {
            for &k in &grid.ks {
                if k == 0 || k > n {
                    log::warn!(
                        "skipping {method}/{}/K={k}: only {n} items",
                        kernel_name(kernel)
                    );
                    rows.push(GridRow {
                        method,
                        kernel,
                        k,
                        center_variance: None,
                    });
                    continue;
                }
                let s = grid_seed(seed, method, kernel, k);
                let model = match (&km, data) {
                    (Some(m), _) => {
                        fit_points(&DenseRows(m.view()), method, kernel, Some(m), k, s)?
                    }
                    (None, FeatureData::Sparse(r)) => {
                        fit_points(&SparseRows::new(r)?, method, None, None, k, s)?
                    }
                    (None, FeatureData::Dense(x)) => {
                        fit_points(&DenseRows(x), method, None, None, k, s)?
                    }
                };
                rows.push(GridRow {
                    method,
                    kernel,
                    k,
                    center_variance: Some(model.center_variance),
                });
                match &best {
                    Some(b) if model.center_variance > b.center_variance => best = Some(model),
                    Some(b) => {
                        if model.center_variance == b.center_variance {
                            log::info!(
                                "tie at V = {}: keeping {}/{}/K={} over {method}/{}/K={k}",
                                b.center_variance,
                                b.method,
                                kernel_name(b.kernel),
                                b.k,
                                kernel_name(kernel)
                            );
                        }
                    }
                    None => best = Some(model),
                }
            }
        }
    }
    let model =
        best.ok_or_else(|| Error::Config(format!("every grid point was skipped ({n} items)")))?;
    Ok(FinetuneResult { model, rows })
}

fn dominant_relation_cluster(
    kg: &KnowledgeGraph,
    relation_model: &ClusterModel,
) -> Vec<Option<u32>> {
    let k = relation_model.k;
    let mut counts = vec![0u32; kg.n_entities() * k];
    for t in &kg.train {
        let c = relation_model.assignment[t.relation as usize] as usize;
        counts[t.head as usize * k + c] += 1;
        if t.tail != t.head {
            counts[t.tail as usize * k + c] += 1;
        }
    }
    counts
        .chunks(k)
        .map(|row| {
            let mut best: Option<u32> = None;
            for (c, &v) in row.iter().enumerate() {
                if v > 0 && best.is_none_or(|b| v > row[b as usize]) {
                    best = Some(c as u32);
                }
            }
            best
        })
        .collect()
}

/// Folds each item's raw co-occurrence counts into K cluster buckets.
///
/// Entities: every training triple linking entity `x` to a counterpart `y`
/// contributes its two units (the relation slot and the entity slot) to the
/// cluster of `y`. Relations: every entity slot of a triple with relation
/// `x` goes to the relation cluster in which that entity occurs most often.
/// Either way the row sum equals the raw count sum.
pub fn cluster_features(
    kind: ItemKind,
    model: &ClusterModel,
    kg: &KnowledgeGraph,
) -> Result<Array2<u32>> {
    let n_items = match kind {
        ItemKind::Entity => kg.n_entities(),
        ItemKind::Relation => kg.n_relations(),
    };
    if model.assignment.len() != n_items {
        return Err(Error::Parameter(format!(
            "cluster model covers {} items, expected {n_items}",
            model.assignment.len()
        )));
    }
    let k = model.k;
    let mut out = Array2::<u32>::zeros((n_items, k));
    match kind {
        ItemKind::Entity => {
            let c = |e: u32| model.assignment[e as usize] as usize;
            for t in &kg.train {
                if t.head == t.tail {
                    out[[t.head as usize, c(t.head)]] += 2;
                } else {
                    out[[t.head as usize, c(t.tail)]] += 2;
                    out[[t.tail as usize, c(t.head)]] += 2;
                }
            }
        }
        ItemKind::Relation => {
            let bucket = dominant_relation_cluster(kg, model);
            for t in &kg.train {
                let r = t.relation as usize;
                out[[
                    r,
                    bucket[t.head as usize].expect("seen in training") as usize,
                ]] += 1;
                if t.tail != t.head {
                    out[[
                        r,
                        bucket[t.tail as usize].expect("seen in training") as usize,
                    ]] += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Frozen per-item count features plus the cluster assignments behind them.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineeredFeatures {
    pub entity_features: Array2<u32>,
    pub relation_features: Array2<u32>,
    pub entity_cluster: Vec<u32>,
    pub relation_cluster: Vec<u32>,
}

const FEATURE_MAGIC: &[u8; 4] = b"PJBF";
const FEATURE_VERSION: u32 = 1;

impl EngineeredFeatures {
    pub fn build(
        kg: &KnowledgeGraph,
        entity_model: &ClusterModel,
        relation_model: &ClusterModel,
    ) -> Result<Self> {
        Ok(Self {
            entity_features: cluster_features(ItemKind::Entity, entity_model, kg)?,
            relation_features: cluster_features(ItemKind::Relation, relation_model, kg)?,
            entity_cluster: entity_model.assignment.clone(),
            relation_cluster: relation_model.assignment.clone(),
        })
    }

    pub fn n_entities(&self) -> usize {
        self.entity_features.nrows()
    }

    pub fn n_relations(&self) -> usize {
        self.relation_features.nrows()
    }

    /// Entity cluster count C_E.
    pub fn entity_dims(&self) -> usize {
        self.entity_features.ncols()
    }

    /// Relation cluster count C_R.
    pub fn relation_dims(&self) -> usize {
        self.relation_features.ncols()
    }

    /// Scaled real-valued weights for model construction.
    pub fn to_feature_set(&self, scale: FeatureScale) -> FeatureSet {
        FeatureSet {
            entity: scale_rows(self.entity_features.mapv(|v| v as f64), scale),
            relation: scale_rows(self.relation_features.mapv(|v| v as f64), scale),
            entity_cluster: self.entity_cluster.clone(),
            relation_cluster: self.relation_cluster.clone(),
        }
    }

    /// Layout: magic `PJBF`, version, n_e, n_r, C_E, C_R (u32 LE), entity
    /// then relation features as row-major f32 LE, then entity and relation
    /// cluster assignments as u32 LE.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(FEATURE_MAGIC)?;
        for v in [
            FEATURE_VERSION,
            self.n_entities() as u32,
            self.n_relations() as u32,
            self.entity_dims() as u32,
            self.relation_dims() as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for &v in self
            .entity_features
            .iter()
            .chain(self.relation_features.iter())
        {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        for &v in self.entity_cluster.iter().chain(&self.relation_cluster) {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let fmt_err = |e: std::io::Error| Error::Format(format!("feature file: {e}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(fmt_err)?;
        if &magic != FEATURE_MAGIC {
            return Err(Error::Format("feature file: bad magic".into()));
        }
        let mut u32s = [0u32; 5];
        for v in u32s.iter_mut() {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(fmt_err)?;
            *v = u32::from_le_bytes(b);
        }
        let [version, n_e, n_r, c_e, c_r] = u32s.map(|v| v as usize);
        if version != FEATURE_VERSION as usize {
            return Err(Error::Format(format!(
                "feature file: unsupported version {version}"
            )));
        }
        let mut read_f32s = |n: usize| -> Result<Vec<u32>> {
            let mut buf = vec![0u8; n * 4];
            r.read_exact(&mut buf).map_err(fmt_err)?;
            Ok(buf
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as u32)
                .collect())
        };
        let ef = read_f32s(n_e * c_e)?;
        let rf = read_f32s(n_r * c_r)?;
        let mut read_u32s = |n: usize| -> Result<Vec<u32>> {
            let mut buf = vec![0u8; n * 4];
            r.read_exact(&mut buf).map_err(fmt_err)?;
            Ok(buf
                .chunks_exact(4)
                .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect())
        };
        let entity_cluster = read_u32s(n_e)?;
        let relation_cluster = read_u32s(n_r)?;
        if entity_cluster.iter().any(|&c| c as usize >= c_e.max(1))
            || relation_cluster.iter().any(|&c| c as usize >= c_r.max(1))
        {
            return Err(Error::Format(
                "feature file: cluster id out of range".into(),
            ));
        }
        Ok(Self {
            entity_features: Array2::from_shape_vec((n_e, c_e), ef)
                .map_err(|e| Error::Format(e.to_string()))?,
            relation_features: Array2::from_shape_vec((n_r, c_r), rf)
                .map_err(|e| Error::Format(e.to_string()))?,
            entity_cluster,
            relation_cluster,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(BufWriter::new(file))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file))
    }
}

/// Real-valued diagonal weights and cluster maps consumed by the model.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub entity: Array2<f64>,
    pub relation: Array2<f64>,
    pub entity_cluster: Vec<u32>,
    pub relation_cluster: Vec<u32>,
}

impl FeatureSet {
    /// Unit weights with every item in cluster 0; useful for baselines.
    pub fn ones(n_e: usize, n_r: usize, k_e: usize, k_r: usize) -> Self {
        Self {
            entity: Array2::ones((n_e, k_e)),
            relation: Array2::ones((n_r, k_r)),
            entity_cluster: vec![0; n_e],
            relation_cluster: vec![0; n_r],
        }
    }
}

fn scale_rows(mut x: Array2<f64>, scale: FeatureScale) -> Array2<f64> {
    match scale {
        FeatureScale::Raw => {}
        FeatureScale::Log1p => x.mapv_inplace(|v| v.signum() * v.abs().ln_1p()),
        FeatureScale::RowMax => {
            for mut row in x.rows_mut() {
                let m = row.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                if m > 0.0 {
                    row.mapv_inplace(|v| v / m);
                }
            }
        }
    }
    x
}

/// Feature-engineering run over both item kinds.
#[derive(Debug, Clone)]
pub struct FeaturizeConfig {
    pub entity_grid: Grid,
    pub relation_grid: Grid,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct FeaturizeOutput {
    pub features: EngineeredFeatures,
    pub entity: FinetuneResult,
    pub relation: FinetuneResult,
}

pub fn featurize(kg: &KnowledgeGraph, cfg: &FeaturizeConfig) -> Result<FeaturizeOutput> {
    let ent_rows = cooccurrence_vectors(ItemKind::Entity, kg);
    let entity = finetune(
        FeatureData::Sparse(&ent_rows),
        &cfg.entity_grid,
        derive_seed(cfg.seed, "features/entity"),
    )?;
    drop(ent_rows);
    let rel_rows = cooccurrence_vectors(ItemKind::Relation, kg);
    let relation = finetune(
        FeatureData::Sparse(&rel_rows),
        &cfg.relation_grid,
        derive_seed(cfg.seed, "features/relation"),
    )?;
    let features = EngineeredFeatures::build(kg, &entity.model, &relation.model)?;
    Ok(FeaturizeOutput {
        features,
        entity,
        relation,
    })
}

/// Baseline features: raw co-occurrence rows projected onto their top
/// principal directions. Cluster maps are passed through unchanged.
pub fn pca_feature_set(
    kg: &KnowledgeGraph,
    k_e: usize,
    k_r: usize,
    entity_cluster: Vec<u32>,
    relation_cluster: Vec<u32>,
    scale: FeatureScale,
    seed: u64,
) -> Result<FeatureSet> {
    let ent = pca_project(&cooccurrence_vectors(ItemKind::Entity, kg), k_e, seed)?;
    let rel = pca_project(&cooccurrence_vectors(ItemKind::Relation, kg), k_r, seed ^ 1)?;
    Ok(FeatureSet {
        entity: scale_rows(ent, scale),
        relation: scale_rows(rel, scale),
        entity_cluster,
        relation_cluster,
    })
}

fn pca_project(rows: &[SparseFeatureVector], k: usize, seed: u64) -> Result<Array2<f64>> {
    let n = rows.len();
    let d = rows.first().map(|r| r.len()).unwrap_or(0);
    if k > d.min(n) {
        return Err(Error::Parameter(format!(
            "cannot project {n} x {d} rows onto {k} components"
        )));
    }
    let mut x = Array2::<f64>::zeros((n, d));
    for (i, r) in rows.iter().enumerate() {
        for (j, v) in r.iter() {
            x[[i, j]] = v as f64;
        }
    }
    let mean = x.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(d));
    x -= &mean;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = Array2::from_shape_fn((d, k), |_| rng.gen_range(-1.0..1.0));
    modified_gram_schmidt(&mut v);
    for _ in 0..100 {
        let xv = x.dot(&v);
        let mut next = x.t().dot(&xv);
        modified_gram_schmidt(&mut next);
        v = next;
    }
    Ok(x.dot(&v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{Triple, Vocabulary};
    use ndarray::array;

    fn kg_from(n_e: usize, n_r: usize, train: &[(u32, u32, u32)]) -> KnowledgeGraph {
        let entities = (0..n_e).map(|i| format!("e{i}")).collect();
        let relations = (0..n_r).map(|i| format!("r{i}")).collect();
        let vocab = Vocabulary::from_names(entities, relations).unwrap();
        let train = train
            .iter()
            .map(|&(h, r, t)| Triple::new(h, r, t))
            .collect();
        KnowledgeGraph::from_splits(vocab, train, vec![], vec![]).unwrap()
    }

    #[test]
    fn single_triple_cooccurrence() {
        let kg = kg_from(2, 1, &[(0, 0, 1)]);
        let v = cooccurrence_vector(Item::Entity(0), &kg).unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(v.get(0), 1);
        assert_eq!(v.get(1 + 1), 1);
        assert_eq!(v.get(1), 0);
        let r = cooccurrence_vector(Item::Relation(0), &kg).unwrap();
        assert_eq!((r.get(0), r.get(1)), (1, 1));
    }

    #[test]
    fn isolated_entity_is_zero() {
        let kg = kg_from(3, 1, &[(0, 0, 1)]);
        assert_eq!(cooccurrence_vector(Item::Entity(2), &kg).unwrap().nnz(), 0);
        assert!(cooccurrence_vector(Item::Entity(3), &kg).is_err());
    }

    #[test]
    fn kernels_on_small_vectors() {
        let x = array![[1.0, 0.0], [1.0, 1.0], [0.0, 0.0]];
        let poly = kernel_matrix(x.view(), Kernel::Polynomial).unwrap();
        assert_eq!(poly[[0, 1]], 2.0);
        let lin = kernel_matrix(x.view(), Kernel::Linear).unwrap();
        assert_eq!(lin[[0, 1]], 1.0);
        let rbf = kernel_matrix(x.view(), Kernel::Rbf).unwrap();
        for i in 0..3 {
            assert_eq!(rbf[[i, i]], 1.0);
        }
        assert!((rbf[[0, 1]] - (-1.0f64).exp()).abs() < 1e-15);
        let cos = kernel_matrix(x.view(), Kernel::Cosine).unwrap();
        assert!((cos[[1, 1]] - 1.0).abs() < 1e-15);
        assert_eq!(cos[[2, 2]], 0.0);
        assert_eq!(cos[[0, 2]], 0.0);
        let sig = kernel_matrix(x.view(), Kernel::Sigmoid).unwrap();
        assert!((sig[[2, 2]] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn sparse_kernel_dimension_mismatch() {
        let a = SparseFeatureVector::from_pairs(3, [(0, 1)]).unwrap();
        let b = SparseFeatureVector::from_pairs(4, [(0, 1)]).unwrap();
        assert!(matches!(
            kernel_matrix_sparse(&[a, b], Kernel::Linear),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn center_variance_small_cases() {
        assert_eq!(center_variance(array![[1.0, 2.0], [1.0, 2.0]].view()), 0.0);
        assert_eq!(center_variance(array![[0.0], [2.0]].view()), 1.0);
    }

    #[test]
    fn k_one_puts_everything_in_cluster_zero() {
        let x = array![[0.0, 1.0], [2.0, 3.0], [4.0, 8.0]];
        let m = fit_clusters(
            FeatureData::Dense(x.view()),
            ClusterMethod::KMeans,
            None,
            1,
            3,
        )
        .unwrap();
        assert!(m.assignment.iter().all(|&c| c == 0));
        assert_eq!(m.centers.row(0).to_vec(), vec![2.0, 4.0]);
        assert_eq!(m.center_variance, 0.0);
    }

    #[test]
    fn k_too_large_is_parameter_error() {
        let x = array![[0.0], [1.0]];
        let err = fit_clusters(
            FeatureData::Dense(x.view()),
            ClusterMethod::KMeans,
            None,
            3,
            0,
        );
        assert!(matches!(err, Err(Error::Parameter(_))));
    }

    #[test]
    fn every_method_yields_k_nonempty_clusters() {
        let x = Array2::from_shape_fn((30, 3), |(i, j)| {
            ((i * 7 + j * 3) % 11) as f64 + (i / 10) as f64 * 20.0
        });
        for method in ClusterMethod::ALL {
            for kernel in [
                None,
                Some(Kernel::Rbf),
                Some(Kernel::MutualKnn),
                Some(Kernel::Cosine),
            ] {
                let m = fit_clusters(FeatureData::Dense(x.view()), method, kernel, 4, 11).unwrap();
                let sizes = m.cluster_sizes();
                assert_eq!(sizes.len(), 4);
                assert!(
                    sizes.iter().all(|&s| s > 0),
                    "{method} {kernel:?}: {sizes:?}"
                );
                assert!((m.center_variance - center_variance(m.centers.view())).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn feature_file_round_trip() {
        let f = EngineeredFeatures {
            entity_features: array![[1, 2], [3, 0], [0, 9]],
            relation_features: array![[4], [5]],
            entity_cluster: vec![0, 1, 1],
            relation_cluster: vec![0, 0],
        };
        let mut buf = Vec::new();
        f.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"PJBF");
        assert_eq!(EngineeredFeatures::read_from(buf.as_slice()).unwrap(), f);
        buf[0] = b'X';
        assert!(EngineeredFeatures::read_from(buf.as_slice()).is_err());
    }

    #[test]
    fn unfitted_model_rejected() {
        let kg = kg_from(3, 1, &[(0, 0, 1)]);
        let model = ClusterModel {
            method: ClusterMethod::KMeans,
            kernel: None,
            k: 1,
            centers: Array2::zeros((1, 1)),
            assignment: vec![0],
            center_variance: 0.0,
            objective_trace: vec![],
        };
        assert!(cluster_features(ItemKind::Entity, &model, &kg).is_err());
    }

    #[test]
    fn finetune_singleton_and_all_skipped() {
        let x = array![[0.0], [1.0], [5.0]];
        let grid = Grid::single(ClusterMethod::KMeans, None, 2);
        let res = finetune(FeatureData::Dense(x.view()), &grid, 1).unwrap();
        assert_eq!(
            (res.model.method, res.model.kernel, res.model.k),
            (ClusterMethod::KMeans, None, 2)
        );
        assert_eq!(res.rows.len(), 1);
        let grid = Grid::single(ClusterMethod::KMeans, None, 10);
        assert!(matches!(
            finetune(FeatureData::Dense(x.view()), &grid, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn pca_features_have_requested_width() {
        let kg = kg_from(
            5,
            2,
            &[(0, 0, 1), (1, 1, 2), (2, 0, 3), (3, 1, 4), (4, 0, 0)],
        );
        let fs = pca_feature_set(&kg, 3, 2, vec![0; 5], vec![0; 2], FeatureScale::Raw, 1).unwrap();
        assert_eq!(fs.entity.dim(), (5, 3));
        assert_eq!(fs.relation.dim(), (2, 2));
    }
}
