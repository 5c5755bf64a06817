//! Linear-chain CRF with explicit start and end scores.

use rand::Rng;

use crate::error::{Error, Result};
use crate::math::{argmax, logsumexp};
use crate::neural::{Matrix, Real, TensorRef};
use crate::tokenizer::TagId;

/// `trans[i][j]` scores the move from tag `i` to tag `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct CrfParams<S> {
    pub trans: Matrix<S>,
    pub start: Vec<S>,
    pub end: Vec<S>,
}

impl<S: Real> CrfParams<S> {
    pub fn zeros(k: usize) -> Self {
        Self {
            trans: Matrix::zeros(k, k),
            start: vec![S::default(); k],
            end: vec![S::default(); k],
        }
    }

    /// Small uniform transition scores, zero start/end.
    pub fn init<R: Rng>(k: usize, rng: &mut R) -> Self {
        let r = (6.0 / (2 * k) as f64).sqrt() * 0.1;
        Self {
            trans: Matrix::from_fn(k, k, |_, _| rng.gen_range(-r..=r)),
            ..Self::zeros(k)
        }
    }

    pub fn n_tags(&self) -> usize {
        self.start.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.n_tags();
        if k == 0 || self.end.len() != k || self.trans.shape() != (k, k) {
            return Err(Error::invalid("inconsistent CRF parameter shapes"));
        }
        if self.tensors().iter().any(|t| t.data.iter().any(|v| !v.wide().is_finite())) {
            return Err(Error::invalid("non-finite CRF parameter"));
        }
        Ok(())
    }

    pub fn tensors(&self) -> Vec<TensorRef<'_, S>> {
        let k = self.n_tags();
        vec![
            TensorRef {
                name: "crf.trans".into(),
                shape: vec![self.trans.rows(), self.trans.cols()],
                data: self.trans.as_slice(),
            },
            TensorRef {
                name: "crf.start".into(),
                shape: vec![k],
                data: &self.start,
            },
            TensorRef {
                name: "crf.end".into(),
                shape: vec![self.end.len()],
                data: &self.end,
            },
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [S]> {
        vec![self.trans.as_mut_slice(), &mut self.start, &mut self.end]
    }

    fn wide(&self) -> Wide {
        let k = self.n_tags();
        Wide {
            trans: (0..k)
                .map(|i| self.trans.row(i).iter().map(|v| v.wide()).collect())
                .collect(),
            start: self.start.iter().map(|v| v.wide()).collect(),
            end: self.end.iter().map(|v| v.wide()).collect(),
        }
    }
}

impl CrfParams<f64> {
    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b.data).for_each(|(x, y)| *x += y);
        }
    }
}

struct Wide {
    trans: Vec<Vec<f64>>,
    start: Vec<f64>,
    end: Vec<f64>,
}

fn check<S: Real>(e: &Matrix<S>, p: &CrfParams<S>) -> Result<()> {
    let k = p.n_tags();
    if p.end.len() != k || p.trans.shape() != (k, k) {
        return Err(Error::invalid("inconsistent CRF parameter shapes"));
    }
    if e.rows() == 0 {
        return Err(Error::invalid("empty emission matrix"));
    }
    if e.cols() != k {
        return Err(Error::invalid(format!(
            "emission matrix has {} tags, CRF has {k}",
            e.cols()
        )));
    }
    Ok(())
}

fn check_tags(y: &[TagId], t_len: usize, k: usize) -> Result<()> {
    if y.len() != t_len {
        return Err(Error::invalid(format!(
            "{} tags for {t_len} positions",
            y.len()
        )));
    }
    if let Some(bad) = y.iter().find(|&&tag| tag >= k) {
        return Err(Error::invalid(format!("tag {bad} out of range for {k} tags")));
    }
    Ok(())
}

fn emission_rows<S: Real>(e: &Matrix<S>) -> Vec<Vec<f64>> {
    (0..e.rows())
        .map(|t| e.row(t).iter().map(|v| v.wide()).collect())
        .collect()
}

pub fn path_score<S: Real>(e: &Matrix<S>, y: &[TagId], p: &CrfParams<S>) -> Result<f64> {
    check(e, p)?;
    check_tags(y, e.rows(), p.n_tags())?;
    let mut s = p.start[y[0]].wide() + p.end[y[y.len() - 1]].wide();
    for (t, &tag) in y.iter().enumerate() {
        s += e.get(t, tag).wide();
        if t > 0 {
            s += p.trans.get(y[t - 1], tag).wide();
        }
    }
    Ok(s)
}

/// Log-space forward scores, `alpha[t][j]`.
fn forward_scores(e: &[Vec<f64>], w: &Wide) -> Vec<Vec<f64>> {
    let k = w.start.len();
    let mut alpha = Vec::with_capacity(e.len());
    alpha.push((0..k).map(|j| w.start[j] + e[0][j]).collect::<Vec<_>>());
    let mut buf = vec![0.0; k];
    for row in &e[1..] {
        let prev = alpha.last().unwrap();
        let next = (0..k)
            .map(|j| {
                for i in 0..k {
                    buf[i] = prev[i] + w.trans[i][j];
                }
                row[j] + logsumexp(&buf)
            })
            .collect();
        alpha.push(next);
    }
    alpha
}

/// Log-space backward scores, `beta[t][i]`, including the end vector.
fn backward_scores(e: &[Vec<f64>], w: &Wide) -> Vec<Vec<f64>> {
    let (t_len, k) = (e.len(), w.start.len());
    let mut beta = vec![vec![0.0; k]; t_len];
    beta[t_len - 1].clone_from(&w.end);
    let mut buf = vec![0.0; k];
    for t in (0..t_len - 1).rev() {
        for i in 0..k {
            for j in 0..k {
                buf[j] = w.trans[i][j] + e[t + 1][j] + beta[t + 1][j];
            }
            beta[t][i] = logsumexp(&buf);
        }
    }
    beta
}

fn log_z(alpha: &[Vec<f64>], end: &[f64]) -> f64 {
    let last = alpha.last().unwrap();
    let v: Vec<f64> = last.iter().zip(end).map(|(a, b)| a + b).collect();
    logsumexp(&v)
}

pub fn log_partition<S: Real>(e: &Matrix<S>, p: &CrfParams<S>) -> Result<f64> {
    check(e, p)?;
    let w = p.wide();
    Ok(log_z(&forward_scores(&emission_rows(e), &w), &w.end))
}

/// Per-position tag marginals `P(y_t = k)`.
pub fn marginals<S: Real>(e: &Matrix<S>, p: &CrfParams<S>) -> Result<Matrix<f64>> {
    check(e, p)?;
    let w = p.wide();
    let rows = emission_rows(e);
    let alpha = forward_scores(&rows, &w);
    let beta = backward_scores(&rows, &w);
    let z = log_z(&alpha, &w.end);
    Ok(Matrix::from_fn(e.rows(), e.cols(), |t, k| {
        (alpha[t][k] + beta[t][k] - z).exp()
    }))
}

#[derive(Debug, Clone)]
pub struct CrfOutput {
    pub loss: f64,
    pub d_emissions: Matrix<f64>,
    pub grads: CrfParams<f64>,
}

/// Negative log-likelihood of the gold path and its gradients
/// (expected counts minus observed counts).
pub fn nll_and_gradients<S: Real>(e: &Matrix<S>, y: &[TagId], p: &CrfParams<S>) -> Result<CrfOutput> {
    check(e, p)?;
    let (t_len, k) = (e.rows(), p.n_tags());
    check_tags(y, t_len, k)?;
    let w = p.wide();
    let rows = emission_rows(e);
    let alpha = forward_scores(&rows, &w);
    let beta = backward_scores(&rows, &w);
    let z = log_z(&alpha, &w.end);
    let gold = path_score(e, y, p)?;
    // rounding can leave a tiny negative value when one path holds all mass
    let loss = (z - gold).max(0.0);

    let mut grads = CrfParams::<f64>::zeros(k);
    let mut d_emissions = Matrix::zeros(t_len, k);
    for t in 0..t_len {
        for j in 0..k {
            d_emissions.set(t, j, (alpha[t][j] + beta[t][j] - z).exp());
        }
    }
    for j in 0..k {
        grads.start[j] = d_emissions.get(0, j);
        grads.end[j] = d_emissions.get(t_len - 1, j);
    }
    for t in 1..t_len {
        for i in 0..k {
            for j in 0..k {
                let pair = alpha[t - 1][i] + w.trans[i][j] + rows[t][j] + beta[t][j] - z;
                let g = grads.trans.get(i, j) + pair.exp();
                grads.trans.set(i, j, g);
            }
        }
    }
    grads.start[y[0]] -= 1.0;
    grads.end[y[t_len - 1]] -= 1.0;
    for (t, &tag) in y.iter().enumerate() {
        let v = d_emissions.get(t, tag) - 1.0;
        d_emissions.set(t, tag, v);
        if t > 0 {
            let g = grads.trans.get(y[t - 1], tag) - 1.0;
            grads.trans.set(y[t - 1], tag, g);
        }
    }
    Ok(CrfOutput {
        loss,
        d_emissions,
        grads,
    })
}

/// Highest-scoring tag path and its score. On ties the lowest tag index wins
/// at every step.
pub fn viterbi<S: Real>(e: &Matrix<S>, p: &CrfParams<S>) -> Result<(Vec<TagId>, f64)> {
    check(e, p)?;
    let (t_len, k) = (e.rows(), p.n_tags());
    let w = p.wide();
    let rows = emission_rows(e);
    let mut delta: Vec<f64> = (0..k).map(|j| w.start[j] + rows[0][j]).collect();
    let mut back = vec![vec![0usize; k]; t_len];
    let mut cand = vec![0.0; k];
    for t in 1..t_len {
        let mut next = vec![0.0; k];
        for j in 0..k {
            for i in 0..k {
                cand[i] = delta[i] + w.trans[i][j];
            }
            let best = argmax(&cand);
            back[t][j] = best;
            next[j] = cand[best] + rows[t][j];
        }
        delta = next;
    }
    let finals: Vec<f64> = delta.iter().zip(&w.end).map(|(d, e)| d + e).collect();
    let mut tag = argmax(&finals);
    let score = finals[tag];
    let mut path = vec![0; t_len];
    path[t_len - 1] = tag;
    for t in (1..t_len).rev() {
        tag = back[t][tag];
        path[t - 1] = tag;
    }
    Ok((path, score))
}
