//! Trainable parameters, the combine operators, candidate scoring and
//! exact reverse-mode gradients.
//!
//! Shapes: entity embeddings are `n_e x k_e`, relation embeddings
//! `n_r x k_r`. The bilinear combine builds `a` (k_e) from the head and
//! `b` (k_r) from the relation, squashes the outer product `a b^T`
//! elementwise into `M`, and projects `t = M r` back to k_e, where it is
//! scored against candidate entity rows.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{Activation, Mode};
use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::kg::check_id;

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation's output `y`.
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

/// All model parameters. Engineered features and cluster maps are frozen;
/// everything else is trained.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub mode: Mode,
    pub activation: Activation,
    /// Head inputs and candidate rows, `n_e x k_e`.
    pub entity: Array2<f64>,
    /// `n_r x k_r`
    pub relation: Array2<f64>,
    /// Scalar bias added to every candidate logit.
    pub proj_bias: f64,
    /// Per entity-cluster bias on the head side, `C_E x k_e` (bilinear mode only).
    pub entity_cluster_bias: Array2<f64>,
    /// Per relation-cluster bias, `C_R x k_r` (bilinear mode only).
    pub relation_cluster_bias: Array2<f64>,
    /// Additive combine bias of the elementwise mode, length k.
    pub combine_bias: Array1<f64>,
    pub entity_features: Array2<f64>,
    pub relation_features: Array2<f64>,
    pub entity_cluster: Vec<u32>,
    pub relation_cluster: Vec<u32>,
}

impl Params {
    /// Random uniform embeddings in `[-0.5/sqrt(k), 0.5/sqrt(k)]`, zero biases.
    /// Embedding widths are taken from the feature widths, which are also
    /// the cluster counts.
    pub fn new(
        mode: Mode,
        activation: Activation,
        features: &FeatureSet,
        seed: u64,
    ) -> Result<Self> {
        let (n_e, k_e) = features.entity.dim();
        let (n_r, k_r) = features.relation.dim();
        if features.entity_cluster.len() != n_e || features.relation_cluster.len() != n_r {
            return Err(Error::Dimension(
                "cluster maps do not cover every item".into(),
            ));
        }
        if let Some(&c) = features.entity_cluster.iter().find(|&&c| c as usize >= k_e) {
            return Err(Error::Dimension(format!(
                "entity cluster {c} out of range for {k_e} clusters"
            )));
        }
        if let Some(&c) = features
            .relation_cluster
            .iter()
            .find(|&&c| c as usize >= k_r)
        {
            return Err(Error::Dimension(format!(
                "relation cluster {c} out of range for {k_r} clusters"
            )));
        }
        if mode == Mode::ProjE && k_e != k_r {
            return Err(Error::Dimension(format!(
                "elementwise combine needs equal widths, got {k_e} and {k_r}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let be = 0.5 / (k_e as f64).sqrt();
        let br = 0.5 / (k_r as f64).sqrt();
        let entity = Array2::from_shape_fn((n_e, k_e), |_| rng.gen_range(-be..=be));
        let relation = Array2::from_shape_fn((n_r, k_r), |_| rng.gen_range(-br..=br));
        let (ecb, rcb, cb) = match mode {
            Mode::ProjB => (
                Array2::zeros((k_e, k_e)),
                Array2::zeros((k_r, k_r)),
                Array1::zeros(0),
            ),
            Mode::ProjE => (
                Array2::zeros((0, k_e)),
                Array2::zeros((0, k_r)),
                Array1::zeros(k_e),
            ),
        };
        Ok(Self {
            mode,
            activation,
            entity,
            relation,
            proj_bias: 0.0,
            entity_cluster_bias: ecb,
            relation_cluster_bias: rcb,
            combine_bias: cb,
            entity_features: features.entity.clone(),
            relation_features: features.relation.clone(),
            entity_cluster: features.entity_cluster.clone(),
            relation_cluster: features.relation_cluster.clone(),
        })
    }

    pub fn n_entities(&self) -> usize {
        self.entity.nrows()
    }

    pub fn n_relations(&self) -> usize {
        self.relation.nrows()
    }

    pub fn dims_entity(&self) -> usize {
        self.entity.ncols()
    }

    pub fn dims_relation(&self) -> usize {
        self.relation.ncols()
    }

    pub fn n_entity_clusters(&self) -> usize {
        self.dims_entity()
    }

    pub fn n_relation_clusters(&self) -> usize {
        self.dims_relation()
    }

    fn check_pair(&self, e: u32, r: u32) -> Result<()> {
        check_id("entity", e as usize, self.n_entities())?;
        check_id("relation", r as usize, self.n_relations())
    }

    /// Trainable arrays as flat slices, in checkpoint order.
    pub fn trainable_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.entity.as_slice_mut().expect("standard layout"),
            self.relation.as_slice_mut().expect("standard layout"),
            std::slice::from_mut(&mut self.proj_bias),
            self.entity_cluster_bias
                .as_slice_mut()
                .expect("standard layout"),
            self.relation_cluster_bias
                .as_slice_mut()
                .expect("standard layout"),
            self.combine_bias.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn trainable(&self) -> [&[f64]; 6] {
        [
            self.entity.as_slice().expect("standard layout"),
            self.relation.as_slice().expect("standard layout"),
            std::slice::from_ref(&self.proj_bias),
            self.entity_cluster_bias
                .as_slice()
                .expect("standard layout"),
            self.relation_cluster_bias
                .as_slice()
                .expect("standard layout"),
            self.combine_bias.as_slice().expect("standard layout"),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.trainable()
            .iter()
            .all(|s| s.iter().all(|x| x.is_finite()))
    }

    /// `a = D_E[e] * W_E[e] + B_PE[c_e(e)]`
    fn head_factor(&self, e: u32) -> Array1<f64> {
        let c = self.entity_cluster[e as usize] as usize;
        &self.entity_features.row(e as usize) * &self.entity.row(e as usize)
            + self.entity_cluster_bias.row(c)
    }

    /// `b = D_R[r] * W_R[r] + B_QR[c_r(r)]`
    fn relation_factor(&self, r: u32) -> Array1<f64> {
        let c = self.relation_cluster[r as usize] as usize;
        &self.relation_features.row(r as usize) * &self.relation.row(r as usize)
            + self.relation_cluster_bias.row(c)
    }

    /// Bilinear combine: `t = f(a b^T) r`.
    pub fn combine_projb(&self, e: u32, r: u32) -> Result<CombineOutput> {
        self.check_pair(e, r)?;
        if self.mode != Mode::ProjB {
            return Err(Error::Parameter(
                "bilinear combine needs cluster biases".into(),
            ));
        }
        let a = self.head_factor(e);
        let b = self.relation_factor(r);
        let rv = self.relation.row(r as usize);
        let f = self.activation;
        let m = Array2::from_shape_fn((a.len(), b.len()), |(i, j)| f.apply(a[i] * b[j]));
        let t = m.dot(&rv);
        Ok(CombineOutput { t, a, b, m })
    }

    /// The bilinear combine with its activation argument built from four
    /// separately computed outer products.
    pub fn expand_combine(&self, e: u32, r: u32) -> Result<CombineOutput> {
        self.check_pair(e, r)?;
        if self.mode != Mode::ProjB {
            return Err(Error::Parameter(
                "bilinear combine needs cluster biases".into(),
            ));
        }
        let de_e = &self.entity_features.row(e as usize) * &self.entity.row(e as usize);
        let dr_r = &self.relation_features.row(r as usize) * &self.relation.row(r as usize);
        let bpe = self
            .entity_cluster_bias
            .row(self.entity_cluster[e as usize] as usize)
            .to_owned();
        let bqr = self
            .relation_cluster_bias
            .row(self.relation_cluster[r as usize] as usize)
            .to_owned();
        let outer = |x: &Array1<f64>, y: &Array1<f64>| {
            Array2::from_shape_fn((x.len(), y.len()), |(i, j)| x[i] * y[j])
        };
        let z = outer(&de_e, &dr_r) + outer(&bpe, &dr_r) + outer(&de_e, &bqr) + outer(&bpe, &bqr);
        let m = z.mapv(|x| self.activation.apply(x));
        let t = m.dot(&self.relation.row(r as usize));
        Ok(CombineOutput {
            t,
            a: de_e + bpe,
            b: dr_r + bqr,
            m,
        })
    }

    /// Elementwise combine: `t = f(D_E[e] * e + D_R[r] * r + b_c)`.
    pub fn combine_proje(&self, e: u32, r: u32) -> Result<Array1<f64>> {
        Ok(self.combine_proje_cached(e, r)?.0)
    }

    fn combine_proje_cached(&self, e: u32, r: u32) -> Result<(Array1<f64>, Array1<f64>)> {
        self.check_pair(e, r)?;
        if self.dims_entity() != self.dims_relation()
            || self.combine_bias.len() != self.dims_entity()
        {
            return Err(Error::Dimension(
                "elementwise combine needs equal widths and a combine bias".into(),
            ));
        }
        let pre = &self.entity_features.row(e as usize) * &self.entity.row(e as usize)
            + &self.relation_features.row(r as usize) * &self.relation.row(r as usize)
            + &self.combine_bias;
        let t = pre.mapv(|x| self.activation.apply(x));
        Ok((t, pre))
    }

    /// Combine with the operator of the configured mode.
    pub fn combine(&self, e: u32, r: u32) -> Result<Combined> {
        match self.mode {
            Mode::ProjB => Ok(Combined::ProjB(self.combine_projb(e, r)?)),
            Mode::ProjE => {
                let (t, pre) = self.combine_proje_cached(e, r)?;
                Ok(Combined::ProjE { t, pre })
            }
        }
    }

    /// `W_E[c] . t + b_p` for each candidate.
    pub fn logits(&self, t: ArrayView1<'_, f64>, candidates: &[u32]) -> Result<Vec<f64>> {
        if t.len() != self.dims_entity() {
            return Err(Error::Dimension(format!(
                "projection has length {}, expected {}",
                t.len(),
                self.dims_entity()
            )));
        }
        candidates
            .iter()
            .map(|&c| {
                check_id("entity", c as usize, self.n_entities())?;
                Ok(self.entity.row(c as usize).dot(&t) + self.proj_bias)
            })
            .collect()
    }

    /// Logits of every entity, in id order.
    pub fn logits_all(&self, t: ArrayView1<'_, f64>) -> Array1<f64> {
        self.entity.dot(&t) + self.proj_bias
    }

    /// Independent sigmoid score per candidate.
    pub fn score_pointwise(&self, t: ArrayView1<'_, f64>, candidates: &[u32]) -> Result<Vec<f64>> {
        Ok(self
            .logits(t, candidates)?
            .into_iter()
            .map(sigmoid)
            .collect())
    }

    /// Softmax over the candidate logits.
    pub fn score_listwise(&self, t: ArrayView1<'_, f64>, candidates: &[u32]) -> Result<Vec<f64>> {
        if candidates.is_empty() {
            return Err(Error::Parameter("empty candidate set".into()));
        }
        Ok(softmax(&self.logits(t, candidates)?))
    }

    /// Translation distance `|h + r - t|`, lower is better.
    pub fn score_transe(&self, h: u32, r: u32, t: u32) -> Result<f64> {
        self.check_pair(h, r)?;
        check_id("entity", t as usize, self.n_entities())?;
        if self.dims_entity() != self.dims_relation() {
            return Err(Error::Dimension(
                "translation score needs equal widths".into(),
            ));
        }
        let d = &self.entity.row(h as usize) + &self.relation.row(r as usize)
            - self.entity.row(t as usize);
        Ok(d.dot(&d).sqrt())
    }

    /// Stages a batch of (anchor, relation) pairs as 2-D and 3-D tensors
    /// and evaluates the combine for all of them in one pass.
    pub fn forward_batch(&self, pairs: &[(u32, u32)]) -> Result<BatchForward> {
        for &(e, r) in pairs {
            self.check_pair(e, r)?;
        }
        let n = pairs.len();
        let (k_e, k_r) = (self.dims_entity(), self.dims_relation());
        let gather = |m: &Array2<f64>, ids: &mut dyn Iterator<Item = usize>, w: usize| {
            let mut out = Array2::<f64>::zeros((n, w));
            for (mut row, id) in out.rows_mut().into_iter().zip(ids) {
                row.assign(&m.row(id));
            }
            out
        };
        let heads = gather(&self.entity, &mut pairs.iter().map(|p| p.0 as usize), k_e);
        let head_feats = gather(
            &self.entity_features,
            &mut pairs.iter().map(|p| p.0 as usize),
            k_e,
        );
        let rels = gather(&self.relation, &mut pairs.iter().map(|p| p.1 as usize), k_r);
        let rel_feats = gather(
            &self.relation_features,
            &mut pairs.iter().map(|p| p.1 as usize),
            k_r,
        );
        match self.mode {
            Mode::ProjB => {
                let ecb = gather(
                    &self.entity_cluster_bias,
                    &mut pairs
                        .iter()
                        .map(|p| self.entity_cluster[p.0 as usize] as usize),
                    k_e,
                );
                let rcb = gather(
                    &self.relation_cluster_bias,
                    &mut pairs
                        .iter()
                        .map(|p| self.relation_cluster[p.1 as usize] as usize),
                    k_r,
                );
                let a = heads * head_feats + ecb;
                let b = &rels * rel_feats + rcb;
                let mut m: Array3<f64> =
                    &a.view().insert_axis(Axis(2)) * &b.view().insert_axis(Axis(1));
                let f = self.activation;
                #[cfg(feature = "parallel")]
                m.par_mapv_inplace(|x| f.apply(x));
                #[cfg(not(feature = "parallel"))]
                m.mapv_inplace(|x| f.apply(x));
                let t = (&m * &rels.view().insert_axis(Axis(1))).sum_axis(Axis(2));
                Ok(BatchForward { t, a, b, m })
            }
            Mode::ProjE => {
                if k_e != k_r {
                    return Err(Error::Dimension(
                        "elementwise combine needs equal widths".into(),
                    ));
                }
                let pre = heads * head_feats + rels * rel_feats + &self.combine_bias;
                let t = pre.mapv(|x| self.activation.apply(x));
                Ok(BatchForward {
                    t,
                    a: pre,
                    b: Array2::zeros((n, 0)),
                    m: Array3::zeros((n, 0, 0)),
                })
            }
        }
    }

    /// Reverse pass for one instance given `dL/dlogit` per candidate.
    pub fn backprop(
        &self,
        anchor: u32,
        relation: u32,
        cache: CombinedRef<'_>,
        candidates: &[u32],
        dlogits: &[f64],
    ) -> InstanceGrad {
        debug_assert_eq!(candidates.len(), dlogits.len());
        let t = cache.t();
        let mut dt = Array1::<f64>::zeros(self.dims_entity());
        for (&c, &g) in candidates.iter().zip(dlogits) {
            dt.scaled_add(g, &self.entity.row(c as usize));
        }
        let f = self.activation;
        let de = self.entity_features.row(anchor as usize);
        let dr = self.relation_features.row(relation as usize);
        let mut grad = InstanceGrad {
            candidates: candidates.to_vec(),
            dlogits: dlogits.to_vec(),
            t: t.to_owned(),
            anchor,
            relation,
            anchor_grad: Array1::zeros(0),
            relation_grad: Array1::zeros(0),
            entity_bias: None,
            relation_bias: None,
            combine_bias: None,
        };
        match cache {
            CombinedRef::ProjB { a, b, m, .. } => {
                let rv = self.relation.row(relation as usize);
                // dZ_ij = dt_i r_j f'(M_ij)
                let mut dz = m.to_owned();
                Zip::indexed(&mut dz).for_each(|(i, j), z| {
                    *z = dt[i] * rv[j] * f.derivative_from_output(*z);
                });
                let da = dz.dot(&b);
                let db = dz.t().dot(&a);
                let trailing = m.t().dot(&dt);
                grad.anchor_grad = &da * &de;
                grad.relation_grad = &db * &dr + trailing;
                grad.entity_bias = Some((self.entity_cluster[anchor as usize], da));
                grad.relation_bias = Some((self.relation_cluster[relation as usize], db));
            }
            CombinedRef::ProjE { t, .. } => {
                let du = Zip::from(&dt)
                    .and(&t)
                    .map_collect(|&g, &y| g * f.derivative_from_output(y));
                grad.anchor_grad = &du * &de;
                grad.relation_grad = &du * &dr;
                grad.combine_bias = Some(du);
            }
        }
        grad
    }

    /// Trainable scalar counts next to the closed-form count the model
    /// family is usually quoted with.
    pub fn param_count(&self) -> ParamCount {
        let (n_e, n_r) = (self.n_entities(), self.n_relations());
        let (k_e, k_r) = (self.dims_entity(), self.dims_relation());
        let (c_e, c_r) = (self.n_entity_clusters(), self.n_relation_clusters());
        let entity = n_e * k_e;
        let relation = n_r * k_r;
        let entity_cluster_bias = self.entity_cluster_bias.len();
        let relation_cluster_bias = self.relation_cluster_bias.len();
        let combine_bias = self.combine_bias.len();
        let total =
            entity + relation + entity_cluster_bias + relation_cluster_bias + combine_bias + 1;
        let formula = match self.mode {
            Mode::ProjB => k_e * (n_e + c_e) + k_r * (n_r + c_r) + k_e,
            Mode::ProjE => n_e * k_e + n_r * k_r + 5 * k_e,
        };
        ParamCount {
            mode: self.mode,
            entity,
            relation,
            entity_cluster_bias,
            relation_cluster_bias,
            combine_bias,
            proj_bias: 1,
            frozen: self.entity_features.len() + self.relation_features.len(),
            total,
            formula,
            matches_formula: total == formula,
        }
    }

    /// Binary checkpoint. Header: magic `PJBC` then u32 LE version, mode,
    /// n_e, n_r, k_e, k_r, C_E, C_R, activation. Body: entity, relation,
    /// projection bias, entity-cluster bias, relation-cluster bias, combine
    /// bias, entity features, relation features (all f32 LE, row-major),
    /// then both cluster maps as u32 LE. Trailer: u64 LE checksum of every
    /// preceding byte.
    pub fn write_checkpoint<W: Write>(&self, w: W) -> std::io::Result<()> {
        let mut w = HashingWriter {
            inner: w,
            hasher: Sha256::new(),
        };
        w.write_all(CHECKPOINT_MAGIC)?;
        let header = [
            CHECKPOINT_VERSION,
            mode_code(self.mode),
            self.n_entities() as u32,
            self.n_relations() as u32,
            self.dims_entity() as u32,
            self.dims_relation() as u32,
            self.entity_cluster_bias.nrows() as u32,
            self.relation_cluster_bias.nrows() as u32,
            activation_code(self.activation),
        ];
        for v in header {
            w.write_all(&v.to_le_bytes())?;
        }
        let arrays: [&[f64]; 8] = [
            self.entity.as_slice().expect("standard layout"),
            self.relation.as_slice().expect("standard layout"),
            std::slice::from_ref(&self.proj_bias),
            self.entity_cluster_bias
                .as_slice()
                .expect("standard layout"),
            self.relation_cluster_bias
                .as_slice()
                .expect("standard layout"),
            self.combine_bias.as_slice().expect("standard layout"),
            self.entity_features.as_slice().expect("standard layout"),
            self.relation_features.as_slice().expect("standard layout"),
        ];
        for arr in arrays {
            for &x in arr {
                w.write_all(&(x as f32).to_le_bytes())?;
            }
        }
        for &c in self.entity_cluster.iter().chain(&self.relation_cluster) {
            w.write_all(&c.to_le_bytes())?;
        }
        let sum = checksum(w.hasher.clone());
        w.inner.write_all(&sum.to_le_bytes())?;
        w.inner.flush()
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| Error::Format(format!("checkpoint: {e}")))?;
        if bytes.len() < 4 + 9 * 4 + 8 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Format("checkpoint: bad magic or truncated".into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(trailer.try_into().expect("8 bytes"));
        let mut h = Sha256::new();
        h.update(body);
        if checksum(h) != stored {
            return Err(Error::Format("checkpoint: checksum mismatch".into()));
        }
        let mut cur = Cursor { buf: body, pos: 4 };
        let mut header = [0usize; 9];
        for v in header.iter_mut() {
            *v = cur.u32()? as usize;
        }
        let [version, mode, n_e, n_r, k_e, k_r, c_e, c_r, act] = header;
        if version != CHECKPOINT_VERSION as usize {
            return Err(Error::Format(format!(
                "checkpoint: unsupported version {version}"
            )));
        }
        let mode = match mode {
            0 => Mode::ProjE,
            1 => Mode::ProjB,
            m => return Err(Error::Format(format!("checkpoint: unknown mode {m}"))),
        };
        let activation = match act {
            0 => Activation::Sigmoid,
            1 => Activation::Tanh,
            a => return Err(Error::Format(format!("checkpoint: unknown activation {a}"))),
        };
        let cb_len = if mode == Mode::ProjE { k_e } else { 0 };
        let entity = cur.matrix(n_e, k_e)?;
        let relation = cur.matrix(n_r, k_r)?;
        let proj_bias = cur.f32s(1)?[0];
        let entity_cluster_bias = cur.matrix(c_e, k_e)?;
        let relation_cluster_bias = cur.matrix(c_r, k_r)?;
        let combine_bias = Array1::from(cur.f32s(cb_len)?);
        let entity_features = cur.matrix(n_e, k_e)?;
        let relation_features = cur.matrix(n_r, k_r)?;
        let entity_cluster = (0..n_e).map(|_| cur.u32()).collect::<Result<Vec<_>>>()?;
        let relation_cluster = (0..n_r).map(|_| cur.u32()).collect::<Result<Vec<_>>>()?;
        if cur.pos != body.len() {
            return Err(Error::Format("checkpoint: trailing bytes".into()));
        }
        if entity_cluster.iter().any(|&c| c as usize >= k_e)
            || relation_cluster.iter().any(|&c| c as usize >= k_r)
        {
            return Err(Error::Format("checkpoint: cluster id out of range".into()));
        }
        Ok(Self {
            mode,
            activation,
            entity,
            relation,
            proj_bias,
            entity_cluster_bias,
            relation_cluster_bias,
            combine_bias,
            entity_features,
            relation_features,
            entity_cluster,
            relation_cluster,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_checkpoint(BufWriter::new(file))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_checkpoint(BufReader::new(file))
    }

    /// Copy rounded through f32, i.e. what a checkpoint round trip yields.
    pub fn rounded_to_f32(&self) -> Self {
        let r2 = |a: &Array2<f64>| a.mapv(|x| x as f32 as f64);
        Self {
            entity: r2(&self.entity),
            relation: r2(&self.relation),
            proj_bias: self.proj_bias as f32 as f64,
            entity_cluster_bias: r2(&self.entity_cluster_bias),
            relation_cluster_bias: r2(&self.relation_cluster_bias),
            combine_bias: self.combine_bias.mapv(|x| x as f32 as f64),
            entity_features: r2(&self.entity_features),
            relation_features: r2(&self.relation_features),
            ..self.clone()
        }
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"PJBC";
const CHECKPOINT_VERSION: u32 = 1;

fn mode_code(mode: Mode) -> u32 {
    match mode {
        Mode::ProjE => 0,
        Mode::ProjB => 1,
    }
}

fn activation_code(a: Activation) -> u32 {
    match a {
        Activation::Sigmoid => 0,
        Activation::Tanh => 1,
    }
}

fn checksum(h: Sha256) -> u64 {
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

struct HashingWriter<W> {
    inner: W,
    hasher: Sha256,
}

impl<W: Write> Write for HashingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hasher.update(&buf[..n]);
        Ok(n)
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("checkpoint: truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect())
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Array2<f64>> {
        Array2::from_shape_vec((rows, cols), self.f32s(rows * cols)?)
            .map_err(|e| Error::Format(e.to_string()))
    }
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Forward intermediates of the bilinear combine.
#[derive(Debug, Clone, PartialEq)]
pub struct CombineOutput {
    pub t: Array1<f64>,
    pub a: Array1<f64>,
    pub b: Array1<f64>,
    pub m: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Combined {
    ProjB(CombineOutput),
    /// `pre` is the activation argument.
    ProjE {
        t: Array1<f64>,
        pre: Array1<f64>,
    },
}

impl Combined {
    pub fn t(&self) -> ArrayView1<'_, f64> {
        match self {
            Combined::ProjB(c) => c.t.view(),
            Combined::ProjE { t, .. } => t.view(),
        }
    }

    pub fn view(&self) -> CombinedRef<'_> {
        match self {
            Combined::ProjB(c) => CombinedRef::ProjB {
                t: c.t.view(),
                a: c.a.view(),
                b: c.b.view(),
                m: c.m.view(),
            },
            Combined::ProjE { t, pre } => CombinedRef::ProjE {
                t: t.view(),
                pre: pre.view(),
            },
        }
    }
}

/// Borrowed forward cache, from either a single combine or one row of a batch.
#[derive(Debug, Clone, Copy)]
pub enum CombinedRef<'a> {
    ProjB {
        t: ArrayView1<'a, f64>,
        a: ArrayView1<'a, f64>,
        b: ArrayView1<'a, f64>,
        m: ArrayView2<'a, f64>,
    },
    ProjE {
        t: ArrayView1<'a, f64>,
        pre: ArrayView1<'a, f64>,
    },
}

impl<'a> CombinedRef<'a> {
    pub fn t(&self) -> ArrayView1<'a, f64> {
        match *self {
            CombinedRef::ProjB { t, .. } | CombinedRef::ProjE { t, .. } => t,
        }
    }
}

/// Batched forward intermediates; row `i` belongs to the `i`-th pair.
/// In elementwise mode `a` holds the activation argument and `b`, `m` are empty.
#[derive(Debug, Clone)]
pub struct BatchForward {
    pub t: Array2<f64>,
    pub a: Array2<f64>,
    pub b: Array2<f64>,
    pub m: Array3<f64>,
}

impl BatchForward {
    pub fn len(&self) -> usize {
        self.t.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize, mode: Mode) -> CombinedRef<'_> {
        match mode {
            Mode::ProjB => CombinedRef::ProjB {
                t: self.t.row(i),
                a: self.a.row(i),
                b: self.b.row(i),
                m: self.m.index_axis(Axis(0), i),
            },
            Mode::ProjE => CombinedRef::ProjE {
                t: self.t.row(i),
                pre: self.a.row(i),
            },
        }
    }
}

/// Sparse gradient contribution of one instance.
#[derive(Debug, Clone)]
pub struct InstanceGrad {
    candidates: Vec<u32>,
    dlogits: Vec<f64>,
    t: Array1<f64>,
    anchor: u32,
    relation: u32,
    anchor_grad: Array1<f64>,
    relation_grad: Array1<f64>,
    entity_bias: Option<(u32, Array1<f64>)>,
    relation_bias: Option<(u32, Array1<f64>)>,
    combine_bias: Option<Array1<f64>>,
}

/// Dense gradients shaped like the trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub entity: Array2<f64>,
    pub relation: Array2<f64>,
    pub proj_bias: f64,
    pub entity_cluster_bias: Array2<f64>,
    pub relation_cluster_bias: Array2<f64>,
    pub combine_bias: Array1<f64>,
}

impl Gradients {
    pub fn zeros_like(p: &Params) -> Self {
        Self {
            entity: Array2::zeros(p.entity.raw_dim()),
            relation: Array2::zeros(p.relation.raw_dim()),
            proj_bias: 0.0,
            entity_cluster_bias: Array2::zeros(p.entity_cluster_bias.raw_dim()),
            relation_cluster_bias: Array2::zeros(p.relation_cluster_bias.raw_dim()),
            combine_bias: Array1::zeros(p.combine_bias.raw_dim()),
        }
    }

    pub fn clear(&mut self) {
        self.entity.fill(0.0);
        self.relation.fill(0.0);
        self.proj_bias = 0.0;
        self.entity_cluster_bias.fill(0.0);
        self.relation_cluster_bias.fill(0.0);
        self.combine_bias.fill(0.0);
    }

    pub fn add_instance(&mut self, g: &InstanceGrad) {
        for (&c, &d) in g.candidates.iter().zip(&g.dlogits) {
            self.entity.row_mut(c as usize).scaled_add(d, &g.t);
            self.proj_bias += d;
        }
        self.entity
            .row_mut(g.anchor as usize)
            .scaled_add(1.0, &g.anchor_grad);
        self.relation
            .row_mut(g.relation as usize)
            .scaled_add(1.0, &g.relation_grad);
        if let Some((c, da)) = &g.entity_bias {
            self.entity_cluster_bias
                .row_mut(*c as usize)
                .scaled_add(1.0, da);
        }
        if let Some((c, db)) = &g.relation_bias {
            self.relation_cluster_bias
                .row_mut(*c as usize)
                .scaled_add(1.0, db);
        }
        if let Some(du) = &g.combine_bias {
            self.combine_bias.scaled_add(1.0, du);
        }
    }

    /// Flat slices in the order of [`Params::trainable_mut`].
    pub fn slices(&self) -> [&[f64]; 6] {
        [
            self.entity.as_slice().expect("standard layout"),
            self.relation.as_slice().expect("standard layout"),
            std::slice::from_ref(&self.proj_bias),
            self.entity_cluster_bias
                .as_slice()
                .expect("standard layout"),
            self.relation_cluster_bias
                .as_slice()
                .expect("standard layout"),
            self.combine_bias.as_slice().expect("standard layout"),
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.entity.as_slice_mut().expect("standard layout"),
            self.relation.as_slice_mut().expect("standard layout"),
            std::slice::from_mut(&mut self.proj_bias),
            self.entity_cluster_bias
                .as_slice_mut()
                .expect("standard layout"),
            self.relation_cluster_bias
                .as_slice_mut()
                .expect("standard layout"),
            self.combine_bias.as_slice_mut().expect("standard layout"),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub mode: Mode,
    pub entity: usize,
    pub relation: usize,
    pub entity_cluster_bias: usize,
    pub relation_cluster_bias: usize,
    pub combine_bias: usize,
    pub proj_bias: usize,
    /// Engineered feature entries; not trained.
    pub frozen: usize,
    pub total: usize,
    pub formula: usize,
    pub matches_formula: bool,
}
