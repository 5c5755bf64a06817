//! Token encoder, single bidirectional GRU layer and emission projection,
//! with a hand-derived backward pass.
//!
//! Parameters and activations are stored in a generic [`Real`] (`f32` for
//! models, `f64` for gradient checks); every dot product accumulates in
//! `f64` and gradients are always `f64`.

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::sigmoid;
use crate::tokenizer::PieceId;

pub const DEFAULT_EMBED_DIM: usize = 128;
pub const DEFAULT_HIDDEN_DIM: usize = 256;

pub trait Real: Copy + Default + PartialEq + Debug + Send + Sync + 'static {
    fn cast(x: f64) -> Self;
    fn wide(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn cast(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn wide(self) -> f64 {
        f64::from(self)
    }
}

impl Real for f64 {
    #[inline]
    fn cast(x: f64) -> Self {
        x
    }
    #[inline]
    fn wide(self) -> f64 {
        self
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Matrix<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Real> Matrix<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![S::default(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(S::cast(f(i, j)));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> S {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: S) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn cast<T: Real>(&self) -> Matrix<T> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| T::cast(v.wide())).collect(),
        }
    }

    /// `out += self · x`
    #[inline]
    fn mul_vec_add(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let row = self.row(i);
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(x) {
                acc += a.wide() * b;
            }
            *o += acc;
        }
    }

    /// `out += selfᵀ · v`
    #[inline]
    fn mul_t_vec_add(&self, v: &[f64], out: &mut [f64]) {
        for (i, &vi) in v.iter().enumerate() {
            if vi == 0.0 {
                continue;
            }
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += a.wide() * vi;
            }
        }
    }
}

impl Matrix<f64> {
    /// `self += a bᵀ`
    #[inline]
    fn outer_add(&mut self, a: &[f64], b: &[f64]) {
        for (i, &ai) in a.iter().enumerate() {
            if ai == 0.0 {
                continue;
            }
            for (g, bj) in self.row_mut(i).iter_mut().zip(b) {
                *g += ai * bj;
            }
        }
    }
}

fn widen<S: Real>(xs: &[S]) -> Vec<f64> {
    xs.iter().map(|v| v.wide()).collect()
}

fn xavier<S: Real, R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Matrix<S> {
    let r = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-r..=r))
}

/// Borrowed view of one named parameter tensor.
pub struct TensorRef<'a, S> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [S],
}

/// Parameters of one GRU direction.
#[derive(Debug, Clone, PartialEq)]
pub struct GruDirection<S> {
    pub w_z: Matrix<S>,
    pub w_r: Matrix<S>,
    pub w_h: Matrix<S>,
    pub u_z: Matrix<S>,
    pub u_r: Matrix<S>,
    pub u_h: Matrix<S>,
    pub b_z: Vec<S>,
    pub b_r: Vec<S>,
    pub b_h: Vec<S>,
}

impl<S: Real> GruDirection<S> {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_z: Matrix::zeros(hidden, input),
            w_r: Matrix::zeros(hidden, input),
            w_h: Matrix::zeros(hidden, input),
            u_z: Matrix::zeros(hidden, hidden),
            u_r: Matrix::zeros(hidden, hidden),
            u_h: Matrix::zeros(hidden, hidden),
            b_z: vec![S::default(); hidden],
            b_r: vec![S::default(); hidden],
            b_h: vec![S::default(); hidden],
        }
    }

    fn init<R: Rng>(input: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            w_z: xavier(hidden, input, rng),
            w_r: xavier(hidden, input, rng),
            w_h: xavier(hidden, input, rng),
            u_z: xavier(hidden, hidden, rng),
            u_r: xavier(hidden, hidden, rng),
            u_h: xavier(hidden, hidden, rng),
            ..Self::zeros(input, hidden)
        }
    }

    fn hidden(&self) -> usize {
        self.w_z.rows()
    }

    fn input(&self) -> usize {
        self.w_z.cols()
    }

    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a, S>>) {
        let mats = [
            ("w_z", &self.w_z),
            ("w_r", &self.w_r),
            ("w_h", &self.w_h),
            ("u_z", &self.u_z),
            ("u_r", &self.u_r),
            ("u_h", &self.u_h),
        ];
        for (name, m) in mats {
            out.push(TensorRef {
                name: format!("{prefix}.{name}"),
                shape: vec![m.rows(), m.cols()],
                data: m.as_slice(),
            });
        }
        for (name, b) in [("b_z", &self.b_z), ("b_r", &self.b_r), ("b_h", &self.b_h)] {
            out.push(TensorRef {
                name: format!("{prefix}.{name}"),
                shape: vec![b.len()],
                data: b,
            });
        }
    }

    fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [S]>) {
        out.push(self.w_z.as_mut_slice());
        out.push(self.w_r.as_mut_slice());
        out.push(self.w_h.as_mut_slice());
        out.push(self.u_z.as_mut_slice());
        out.push(self.u_r.as_mut_slice());
        out.push(self.u_h.as_mut_slice());
        out.push(&mut self.b_z);
        out.push(&mut self.b_r);
        out.push(&mut self.b_h);
    }
}

/// Bidirectional GRU weights plus the dense projection to tag scores.
#[derive(Debug, Clone, PartialEq)]
pub struct GruParams<S> {
    pub forward: GruDirection<S>,
    pub backward: GruDirection<S>,
    /// n_tags × 2·hidden
    pub proj_w: Matrix<S>,
    pub proj_b: Vec<S>,
}

impl<S: Real> GruParams<S> {
    pub fn zeros(input: usize, hidden: usize, n_tags: usize) -> Self {
        Self {
            forward: GruDirection::zeros(input, hidden),
            backward: GruDirection::zeros(input, hidden),
            proj_w: Matrix::zeros(n_tags, 2 * hidden),
            proj_b: vec![S::default(); n_tags],
        }
    }

    /// Uniform(±sqrt(6 / (fan_in + fan_out))) weights, zero biases.
    pub fn init<R: Rng>(input: usize, hidden: usize, n_tags: usize, rng: &mut R) -> Self {
        let forward = GruDirection::init(input, hidden, rng);
        let backward = GruDirection::init(input, hidden, rng);
        let proj_w = xavier(n_tags, 2 * hidden, rng);
        Self {
            forward,
            backward,
            proj_w,
            proj_b: vec![S::default(); n_tags],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.forward.input()
    }

    pub fn hidden_dim(&self) -> usize {
        self.forward.hidden()
    }

    pub fn n_tags(&self) -> usize {
        self.proj_w.rows()
    }

    /// Checks shape consistency and finiteness.
    pub fn validate(&self) -> Result<()> {
        let (d, h, k) = (self.input_dim(), self.hidden_dim(), self.n_tags());
        let zero = Self::zeros(d, h, k);
        let shapes_ok = self
            .tensors()
            .iter()
            .zip(zero.tensors())
            .all(|(a, b)| a.shape == b.shape && a.data.len() == b.data.len());
        if !shapes_ok {
            return Err(Error::invalid("inconsistent GRU parameter shapes"));
        }
        if self.tensors().iter().any(|t| t.data.iter().any(|v| !v.wide().is_finite())) {
            return Err(Error::invalid("non-finite GRU parameter"));
        }
        Ok(())
    }

    pub fn tensors(&self) -> Vec<TensorRef<'_, S>> {
        let mut out = Vec::new();
        self.forward.tensors("gru.fwd", &mut out);
        self.backward.tensors("gru.bwd", &mut out);
        out.push(TensorRef {
            name: "proj.w".into(),
            shape: vec![self.proj_w.rows(), self.proj_w.cols()],
            data: self.proj_w.as_slice(),
        });
        out.push(TensorRef {
            name: "proj.b".into(),
            shape: vec![self.proj_b.len()],
            data: &self.proj_b,
        });
        out
    }

    /// Mutable slices in the same order as [`GruParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [S]> {
        let mut out = Vec::new();
        self.forward.tensors_mut(&mut out);
        self.backward.tensors_mut(&mut out);
        out.push(self.proj_w.as_mut_slice());
        out.push(&mut self.proj_b);
        out
    }
}

impl GruParams<f64> {
    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b.data).for_each(|(x, y)| *x += y);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum EncoderConfig {
    TrainableLookup { vocab_size: usize, embed_dim: usize },
    PrecomputedFile { file_path: PathBuf, embed_dim: usize },
}

impl EncoderConfig {
    pub fn embed_dim(&self) -> usize {
        match self {
            Self::TrainableLookup { embed_dim, .. } | Self::PrecomputedFile { embed_dim, .. } => *embed_dim,
        }
    }

    pub fn trainable(&self) -> bool {
        matches!(self, Self::TrainableLookup { .. })
    }
}

/// Maps piece ids (or precomputed-row keys) to input vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<S> {
    config: EncoderConfig,
    table: Matrix<S>,
}

impl<S: Real> Encoder<S> {
    pub fn zeros(vocab_size: usize, embed_dim: usize) -> Result<Self> {
        if vocab_size == 0 || embed_dim == 0 {
            return Err(Error::invalid("vocab_size and embed_dim must be positive"));
        }
        Ok(Self {
            config: EncoderConfig::TrainableLookup {
                vocab_size,
                embed_dim,
            },
            table: Matrix::zeros(vocab_size, embed_dim),
        })
    }

    pub fn lookup<R: Rng>(vocab_size: usize, embed_dim: usize, rng: &mut R) -> Result<Self> {
        let mut enc = Self::zeros(vocab_size, embed_dim)?;
        enc.table = xavier(vocab_size, embed_dim, rng);
        Ok(enc)
    }

    /// Frozen rows read from a precomputed-embedding file.
    pub fn precomputed(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let table = read_embeddings(std::fs::File::open(path)?)?;
        Ok(Self {
            config: EncoderConfig::PrecomputedFile {
                file_path: path.to_path_buf(),
                embed_dim: table.cols(),
            },
            table: table.cast(),
        })
    }

    pub fn from_table(config: EncoderConfig, table: Matrix<S>) -> Result<Self> {
        let rows_ok = match &config {
            EncoderConfig::TrainableLookup { vocab_size, .. } => *vocab_size == table.rows(),
            EncoderConfig::PrecomputedFile { .. } => table.rows() > 0,
        };
        if !rows_ok || config.embed_dim() != table.cols() || config.embed_dim() == 0 {
            return Err(Error::invalid("embedding table does not match encoder config"));
        }
        Ok(Self { config, table })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn embed_dim(&self) -> usize {
        self.table.cols()
    }

    pub fn rows(&self) -> usize {
        self.table.rows()
    }

    pub fn trainable(&self) -> bool {
        self.config.trainable()
    }

    pub fn table(&self) -> &Matrix<S> {
        &self.table
    }

    pub fn table_mut(&mut self) -> &mut Matrix<S> {
        &mut self.table
    }

    pub fn encode(&self, ids: &[PieceId]) -> Result<Matrix<S>> {
        let mut out = Matrix::zeros(ids.len(), self.embed_dim());
        for (t, &id) in ids.iter().enumerate() {
            let id = id as usize;
            if id >= self.table.rows() {
                return Err(Error::invalid(format!(
                    "id {id} out of range for {} embedding rows",
                    self.table.rows()
                )));
            }
            out.row_mut(t).copy_from_slice(self.table.row(id));
        }
        Ok(out)
    }
}

pub const EMBEDDING_MAGIC: &[u8; 4] = b"TPEM";
pub const EMBEDDING_VERSION: u32 = 1;

/// Header `magic, version, count, dim` (u32 LE) then `count × dim` f32 LE.
pub fn write_embeddings<W: Write>(mut out: W, table: &Matrix<f32>) -> Result<()> {
    out.write_all(EMBEDDING_MAGIC)?;
    for v in [EMBEDDING_VERSION, table.rows() as u32, table.cols() as u32] {
        out.write_all(&v.to_le_bytes())?;
    }
    for v in table.as_slice() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_embeddings<R: Read>(mut input: R) -> Result<Matrix<f32>> {
    let mut header = [0u8; 16];
    input.read_exact(&mut header)?;
    if &header[..4] != EMBEDDING_MAGIC {
        return Err(Error::invalid("not a precomputed-embedding file"));
    }
    let word = |i: usize| u32::from_le_bytes(header[4 * i..4 * i + 4].try_into().unwrap());
    if word(1) != EMBEDDING_VERSION {
        return Err(Error::invalid(format!("unsupported embedding file version {}", word(1))));
    }
    let (count, dim) = (word(2) as usize, word(3) as usize);
    let mut bytes = vec![0u8; count * dim * 4];
    input.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Matrix::from_vec(count, dim, data)
}

/// Activations of one direction, indexed by sequence position.
#[derive(Debug, Clone)]
struct DirectionCache<S> {
    z: Vec<S>,
    r: Vec<S>,
    cand: Vec<S>,
    h: Vec<S>,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<S> {
    ids: Vec<PieceId>,
    input: Matrix<S>,
    fwd: DirectionCache<S>,
    bwd: DirectionCache<S>,
    hidden: Matrix<S>,
}

impl<S: Real> ForwardCache<S> {
    pub fn hidden(&self) -> &Matrix<S> {
        &self.hidden
    }
}

fn run_direction<S: Real>(x: &Matrix<S>, p: &GruDirection<S>, reverse: bool) -> DirectionCache<S> {
    let (t_len, h) = (x.rows(), p.hidden());
    let mut cache = DirectionCache {
        z: vec![S::default(); t_len * h],
        r: vec![S::default(); t_len * h],
        cand: vec![S::default(); t_len * h],
        h: vec![S::default(); t_len * h],
    };
    let mut prev = vec![0.0; h];
    let mut a_z = vec![0.0; h];
    let mut a_r = vec![0.0; h];
    let mut a_h = vec![0.0; h];
    let mut rh = vec![0.0; h];
    for step in 0..t_len {
        let t = if reverse { t_len - 1 - step } else { step };
        let xt = widen(x.row(t));
        a_z.copy_from_slice(&widen(&p.b_z));
        a_r.copy_from_slice(&widen(&p.b_r));
        a_h.copy_from_slice(&widen(&p.b_h));
        p.w_z.mul_vec_add(&xt, &mut a_z);
        p.u_z.mul_vec_add(&prev, &mut a_z);
        p.w_r.mul_vec_add(&xt, &mut a_r);
        p.u_r.mul_vec_add(&prev, &mut a_r);
        let base = t * h;
        for j in 0..h {
            let r = S::cast(sigmoid(a_r[j]));
            cache.r[base + j] = r;
            rh[j] = r.wide() * prev[j];
        }
        p.w_h.mul_vec_add(&xt, &mut a_h);
        p.u_h.mul_vec_add(&rh, &mut a_h);
        for j in 0..h {
            let z = S::cast(sigmoid(a_z[j]));
            let c = S::cast(a_h[j].tanh());
            let (zw, cw) = (z.wide(), c.wide());
            let hn = S::cast((1.0 - zw) * prev[j] + zw * cw);
            cache.z[base + j] = z;
            cache.cand[base + j] = c;
            cache.h[base + j] = hn;
            prev[j] = hn.wide();
        }
    }
    cache
}

fn check_input<S: Real>(x: &Matrix<S>, p: &GruParams<S>) -> Result<()> {
    if x.cols() != p.input_dim() {
        return Err(Error::invalid(format!(
            "input width {} does not match GRU input dim {}",
            x.cols(),
            p.input_dim()
        )));
    }
    if p.backward.input() != p.input_dim()
        || p.backward.hidden() != p.hidden_dim()
        || p.proj_w.cols() != 2 * p.hidden_dim()
        || p.proj_b.len() != p.n_tags()
    {
        return Err(Error::invalid("inconsistent GRU parameter shapes"));
    }
    Ok(())
}

fn bigru_cached<S: Real>(x: Matrix<S>, p: &GruParams<S>, ids: Vec<PieceId>) -> Result<ForwardCache<S>> {
    check_input(&x, p)?;
    let fwd = run_direction(&x, &p.forward, false);
    let bwd = run_direction(&x, &p.backward, true);
    let h = p.hidden_dim();
    let mut hidden = Matrix::zeros(x.rows(), 2 * h);
    for t in 0..x.rows() {
        let row = hidden.row_mut(t);
        row[..h].copy_from_slice(&fwd.h[t * h..(t + 1) * h]);
        row[h..].copy_from_slice(&bwd.h[t * h..(t + 1) * h]);
    }
    Ok(ForwardCache {
        ids,
        input: x,
        fwd,
        bwd,
        hidden,
    })
}

/// T × D input → T × 2H hidden states, forward block first, h₀ = 0 in both
/// directions.
pub fn bigru_forward<S: Real>(x: &Matrix<S>, p: &GruParams<S>) -> Result<Matrix<S>> {
    Ok(bigru_cached(x.clone(), p, Vec::new())?.hidden)
}

/// `H · proj_wᵀ + proj_b`, row-wise.
pub fn emissions<S: Real>(hidden: &Matrix<S>, p: &GruParams<S>) -> Result<Matrix<S>> {
    if hidden.cols() != p.proj_w.cols() || p.proj_b.len() != p.proj_w.rows() {
        return Err(Error::invalid(format!(
            "hidden width {} does not match projection {}x{}",
            hidden.cols(),
            p.proj_w.rows(),
            p.proj_w.cols()
        )));
    }
    let bias = widen(&p.proj_b);
    let mut out = Matrix::zeros(hidden.rows(), p.n_tags());
    let mut scores = vec![0.0; p.n_tags()];
    for t in 0..hidden.rows() {
        scores.copy_from_slice(&bias);
        p.proj_w.mul_vec_add(&widen(hidden.row(t)), &mut scores);
        for (o, s) in out.row_mut(t).iter_mut().zip(&scores) {
            *o = S::cast(*s);
        }
    }
    Ok(out)
}

/// encode → Bi-GRU → emissions, keeping the activations for [`backward`].
pub fn forward<S: Real>(
    encoder: &Encoder<S>,
    gru: &GruParams<S>,
    ids: &[PieceId],
) -> Result<(Matrix<S>, ForwardCache<S>)> {
    let x = encoder.encode(ids)?;
    let cache = bigru_cached(x, gru, ids.to_vec())?;
    let e = emissions(&cache.hidden, gru)?;
    Ok((e, cache))
}

/// Gradients of a scalar loss with respect to the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGrads {
    pub gru: GruParams<f64>,
    /// Sparse rows of the embedding-table gradient; empty for frozen encoders.
    pub embeddings: BTreeMap<PieceId, Vec<f64>>,
}

impl NetworkGrads {
    pub fn zeros(input: usize, hidden: usize, n_tags: usize) -> Self {
        Self {
            gru: GruParams::zeros(input, hidden, n_tags),
            embeddings: BTreeMap::new(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        self.gru.add_assign(&other.gru);
        for (id, row) in &other.embeddings {
            let dst = self
                .embeddings
                .entry(*id)
                .or_insert_with(|| vec![0.0; row.len()]);
            dst.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn backprop_direction<S: Real>(
    p: &GruDirection<S>,
    cache: &DirectionCache<S>,
    input: &Matrix<S>,
    d_hidden: &Matrix<f64>,
    offset: usize,
    reverse: bool,
    g: &mut GruDirection<f64>,
    d_input: &mut Matrix<f64>,
) {
    let (t_len, h) = (input.rows(), p.hidden());
    let mut carry = vec![0.0; h];
    let mut da_z = vec![0.0; h];
    let mut da_r = vec![0.0; h];
    let mut da_h = vec![0.0; h];
    let mut rh = vec![0.0; h];
    let mut d_rh = vec![0.0; h];
    let mut d_prev = vec![0.0; h];
    // walk the processing order backwards
    for step in (0..t_len).rev() {
        let t = if reverse { t_len - 1 - step } else { step };
        let prev: Vec<f64> = if step == 0 {
            vec![0.0; h]
        } else {
            let tp = if reverse { t + 1 } else { t - 1 };
            widen(&cache.h[tp * h..(tp + 1) * h])
        };
        let base = t * h;
        let xt = widen(input.row(t));
        let up = &d_hidden.row(t)[offset..offset + h];
        for j in 0..h {
            let dh = up[j] + carry[j];
            let z = cache.z[base + j].wide();
            let r = cache.r[base + j].wide();
            let c = cache.cand[base + j].wide();
            da_h[j] = dh * z * (1.0 - c * c);
            da_z[j] = dh * (c - prev[j]) * z * (1.0 - z);
            d_prev[j] = dh * (1.0 - z);
            rh[j] = r * prev[j];
        }
        g.w_h.outer_add(&da_h, &xt);
        g.u_h.outer_add(&da_h, &rh);
        d_rh.fill(0.0);
        p.u_h.mul_t_vec_add(&da_h, &mut d_rh);
        for j in 0..h {
            let r = cache.r[base + j].wide();
            da_r[j] = d_rh[j] * prev[j] * r * (1.0 - r);
            d_prev[j] += d_rh[j] * r;
        }
        g.w_r.outer_add(&da_r, &xt);
        g.u_r.outer_add(&da_r, &prev);
        g.w_z.outer_add(&da_z, &xt);
        g.u_z.outer_add(&da_z, &prev);
        for j in 0..h {
            g.b_z[j] += da_z[j];
            g.b_r[j] += da_r[j];
            g.b_h[j] += da_h[j];
        }
        p.u_r.mul_t_vec_add(&da_r, &mut d_prev);
        p.u_z.mul_t_vec_add(&da_z, &mut d_prev);
        let dx = d_input.row_mut(t);
        p.w_z.mul_t_vec_add(&da_z, dx);
        p.w_r.mul_t_vec_add(&da_r, dx);
        p.w_h.mul_t_vec_add(&da_h, dx);
        carry.copy_from_slice(&d_prev);
    }
}

/// Exact gradients given the loss gradient at the emission matrix.
///
/// Fails with an invalid-state error when the cache does not belong to
/// parameters of this shape.
pub fn backward<S: Real>(
    d_emissions: &Matrix<f64>,
    cache: &ForwardCache<S>,
    gru: &GruParams<S>,
    encoder_trainable: bool,
) -> Result<NetworkGrads> {
    let (t_len, h, k) = (cache.input.rows(), gru.hidden_dim(), gru.n_tags());
    if cache.input.cols() != gru.input_dim()
        || cache.hidden.cols() != 2 * h
        || cache.fwd.h.len() != t_len * h
    {
        return Err(Error::InvalidState(
            "forward cache does not match the parameters".into(),
        ));
    }
    if d_emissions.shape() != (t_len, k) {
        return Err(Error::InvalidState(format!(
            "emission gradient is {:?}, forward pass produced {t_len}x{k}",
            d_emissions.shape()
        )));
    }
    let mut grads = NetworkGrads::zeros(gru.input_dim(), h, k);

    let mut d_hidden = Matrix::<f64>::zeros(t_len, 2 * h);
    for t in 0..t_len {
        let de = d_emissions.row(t);
        grads.gru.proj_w.outer_add(de, &widen(cache.hidden.row(t)));
        for (b, d) in grads.gru.proj_b.iter_mut().zip(de) {
            *b += d;
        }
        gru.proj_w.mul_t_vec_add(de, d_hidden.row_mut(t));
    }

    let mut d_input = Matrix::<f64>::zeros(t_len, gru.input_dim());
    backprop_direction(
        &gru.forward,
        &cache.fwd,
        &cache.input,
        &d_hidden,
        0,
        false,
        &mut grads.gru.forward,
        &mut d_input,
    );
    backprop_direction(
        &gru.backward,
        &cache.bwd,
        &cache.input,
        &d_hidden,
        h,
        true,
        &mut grads.gru.backward,
        &mut d_input,
    );

    if encoder_trainable {
        if cache.ids.len() != t_len {
            return Err(Error::InvalidState(
                "forward cache has no piece ids for the embedding gradient".into(),
            ));
        }
        for (t, &id) in cache.ids.iter().enumerate() {
            let row = grads
                .embeddings
                .entry(id)
                .or_insert_with(|| vec![0.0; gru.input_dim()]);
            row.iter_mut().zip(d_input.row(t)).for_each(|(a, b)| *a += b);
        }
    }
    Ok(grads)
}
