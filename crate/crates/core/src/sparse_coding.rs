//! Error-constrained orthogonal matching pursuit and k-SVD dictionary
//! learning.
//!
//! Atoms are the columns of a [`Dictionary`] and always have unit l2 norm.
//! A signal is coded greedily: the atom with the largest absolute
//! correlation with the current residual joins the support, and the
//! coefficients on the support are refit by least squares. Coding stops
//! once the residual norm (l1 by default) falls to `epsilon` or the support
//! reaches `max_atoms`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{check_finite, dot, matmul, norm_l1, norm_l2, thin_svd, Matrix};

/// Unit-norm tolerance accepted by [`Dictionary::from_unit_columns`].
pub const UNIT_NORM_TOL: f64 = 1e-10;

/// Norm used for the residual stopping test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualNorm {
    L1,
    L2,
}

impl ResidualNorm {
    pub fn of(self, v: &[f64]) -> f64 {
        match self {
            ResidualNorm::L1 => norm_l1(v),
            ResidualNorm::L2 => norm_l2(v),
        }
    }
}

/// What the dictionary update does with atoms no signal uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnusedAtomPolicy {
    Keep,
    ReplaceWithWorstResidual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KsvdConfig {
    /// Residual tolerance for coding.
    pub epsilon: f64,
    pub max_atoms: usize,
    /// Number of coding (+ update) sweeps per run.
    pub sweeps: usize,
    pub update_dictionary: bool,
    pub unused_atom_policy: UnusedAtomPolicy,
    pub residual_norm: ResidualNorm,
}

impl Default for KsvdConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.045,
            max_atoms: 8,
            sweeps: 5,
            update_dictionary: false,
            unused_atom_policy: UnusedAtomPolicy::ReplaceWithWorstResidual,
            residual_norm: ResidualNorm::L1,
        }
    }
}

impl KsvdConfig {
    pub fn validate(&self, num_atoms: usize) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(Error::config(format!("epsilon must be finite and >= 0, got {}", self.epsilon)));
        }
        if self.max_atoms > num_atoms {
            return Err(Error::config(format!(
                "max_atoms {} exceeds dictionary size {num_atoms}",
                self.max_atoms
            )));
        }
        if self.sweeps == 0 {
            return Err(Error::config("sweeps must be >= 1"));
        }
        Ok(())
    }
}

/// A d × K matrix whose columns (atoms) have unit l2 norm.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    atoms: Matrix,
}

impl Dictionary {
    /// Wraps `atoms` after checking every column is unit-norm.
    pub fn from_unit_columns(atoms: Matrix) -> Result<Self> {
        if atoms.rows() == 0 || atoms.cols() == 0 {
            return Err(Error::InvalidDictionary("dictionary must have d >= 1 and K >= 1".into()));
        }
        for j in 0..atoms.cols() {
            let n = norm_l2(&atoms.column(j));
            if (n - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::InvalidDictionary(format!("atom {j} has norm {n}")));
            }
        }
        Ok(Self { atoms })
    }

    /// Normalizes every column and returns the original column norms, so that
    /// a code `c` against the normalized atoms equals `c[j] / norms[j]`
    /// against the raw columns.
    pub fn normalized(raw: &Matrix) -> Result<(Self, Vec<f64>)> {
        if raw.rows() == 0 || raw.cols() == 0 {
            return Err(Error::InvalidDictionary("dictionary must have d >= 1 and K >= 1".into()));
        }
        let mut atoms = raw.clone();
        let mut norms = Vec::with_capacity(raw.cols());
        for j in 0..raw.cols() {
            let col = raw.column(j);
            let n = norm_l2(&col);
            if n == 0.0 {
                return Err(Error::InvalidDictionary(format!("atom {j} is the zero vector")));
            }
            let unit: Vec<f64> = col.iter().map(|x| x / n).collect();
            atoms.set_column(j, &unit);
            norms.push(n);
        }
        Ok((Self { atoms }, norms))
    }

    pub fn atoms(&self) -> &Matrix {
        &self.atoms
    }

    /// Signal dimension d.
    pub fn dim(&self) -> usize {
        self.atoms.rows()
    }

    /// Number of atoms K.
    pub fn len(&self) -> usize {
        self.atoms.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.cols() == 0
    }

    pub fn atom(&self, j: usize) -> Vec<f64> {
        self.atoms.column(j)
    }

    pub fn into_matrix(self) -> Matrix {
        self.atoms
    }
}

/// Sparse code of one signal.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseCode {
    /// Atom indices in selection order.
    pub support: Vec<usize>,
    pub coefficients: Vec<f64>,
    pub residual_l1: f64,
}

impl SparseCode {
    pub fn densify(&self, num_atoms: usize) -> Vec<f64> {
        let mut out = vec![0.0; num_atoms];
        for (&j, &c) in self.support.iter().zip(&self.coefficients) {
            out[j] = c;
        }
        out
    }
}

/// Orthogonal matching pursuit against unit-norm atoms.
///
/// Besides the `epsilon` / `max_atoms` stopping rules, coding also stops if no
/// remaining atom correlates with the residual or the next atom is linearly
/// dependent on the current support.
pub fn omp_encode(dict: &Dictionary, signal: &[f64], cfg: &KsvdConfig) -> Result<SparseCode> {
    cfg.validate(dict.len())?;
    let d = dict.dim();
    if signal.len() != d {
        return Err(Error::shape(format!(
            "signal of length {} for a dictionary of dimension {d}",
            signal.len()
        )));
    }
    check_finite(signal)?;

    let atoms: Vec<Vec<f64>> = (0..dict.len()).map(|j| dict.atom(j)).collect();
    let signal_scale = norm_l2(signal);

    let mut residual = signal.to_vec();
    let mut support: Vec<usize> = Vec::new();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    // Columns of the triangular factor: atom_k = Σ_i r[k][i] q_i.
    let mut r_cols: Vec<Vec<f64>> = Vec::new();
    let mut projections: Vec<f64> = Vec::new();

    loop {
        if cfg.residual_norm.of(&residual) <= cfg.epsilon || support.len() == cfg.max_atoms {
            break;
        }

        let mut best: Option<(usize, f64)> = None;
        for (j, atom) in atoms.iter().enumerate() {
            if support.contains(&j) {
                continue;
            }
            let c = dot(atom, &residual).abs();
            if best.is_none_or(|(_, b)| c > b) {
                best = Some((j, c));
            }
        }
        let Some((j, corr)) = best else { break };
        if corr <= 1e-14 * signal_scale {
            break;
        }

        let mut w = atoms[j].clone();
        let mut r = vec![0.0; basis.len()];
        for _ in 0..2 {
            for (i, q) in basis.iter().enumerate() {
                let c = dot(q, &w);
                r[i] += c;
                for (wk, qk) in w.iter_mut().zip(q) {
                    *wk -= c * qk;
                }
            }
        }
        let wn = norm_l2(&w);
        if wn < 1e-10 {
            break;
        }
        let q: Vec<f64> = w.iter().map(|x| x / wn).collect();
        r.push(wn);

        let p = dot(&q, &residual);
        for (rk, qk) in residual.iter_mut().zip(&q) {
            *rk -= p * qk;
        }
        support.push(j);
        basis.push(q);
        r_cols.push(r);
        projections.push(p);
    }

    // Back-substitution R c = Qᵀ y.
    let s = support.len();
    let mut coefficients = vec![0.0; s];
    for k in (0..s).rev() {
        let mut acc = projections[k];
        for m in (k + 1)..s {
            acc -= r_cols[m][k] * coefficients[m];
        }
        coefficients[k] = acc / r_cols[k][k];
    }

    let mut final_residual = signal.to_vec();
    for (&j, &c) in support.iter().zip(&coefficients) {
        for (rk, ak) in final_residual.iter_mut().zip(&atoms[j]) {
            *rk -= c * ak;
        }
    }
    check_finite(&coefficients)?;

    Ok(SparseCode {
        support,
        coefficients,
        residual_l1: norm_l1(&final_residual),
    })
}

/// Codes each column of `signals` (d × M) independently.
pub fn encode_columns(dict: &Dictionary, signals: &Matrix, cfg: &KsvdConfig) -> Result<Vec<SparseCode>> {
    if signals.rows() != dict.dim() {
        return Err(Error::shape(format!(
            "signals have {} rows, dictionary dimension is {}",
            signals.rows(),
            dict.dim()
        )));
    }
    (0..signals.cols())
        .map(|j| omp_encode(dict, &signals.column(j), cfg))
        .collect()
}

/// Dense K × M code matrix for the columns of `signals`.
pub fn batch_encode(dict: &Dictionary, signals: &Matrix, cfg: &KsvdConfig) -> Result<Matrix> {
    let codes = encode_columns(dict, signals, cfg)?;
    let mut out = Matrix::zeros(dict.len(), signals.cols());
    for (m, code) in codes.iter().enumerate() {
        for (&j, &c) in code.support.iter().zip(&code.coefficients) {
            out.set(j, m, c);
        }
    }
    Ok(out)
}

/// `‖signals − dict · codes‖_F`.
pub fn reconstruction_error(dict: &Dictionary, signals: &Matrix, codes: &Matrix) -> Result<f64> {
    Ok(signals.sub(&matmul(dict.atoms(), codes)?)?.frobenius_norm())
}

#[derive(Debug, Clone)]
pub struct DictionaryUpdate {
    pub dictionary: Dictionary,
    /// Codes with each used atom's coefficient row replaced alongside it.
    pub codes: Matrix,
    /// Atoms that were unused and got replaced by a signal.
    pub replaced: Vec<usize>,
}

/// One k-SVD dictionary pass: for each atom in index order, the residual
/// restricted to the signals using it is replaced by its best rank-1
/// approximation (leading singular pair), which becomes the new atom and
/// coefficient row. Later atoms see earlier updates.
pub fn ksvd_dictionary_update(
    dict: &Dictionary,
    signals: &Matrix,
    codes: &Matrix,
    policy: UnusedAtomPolicy,
) -> Result<DictionaryUpdate> {
    let (d, k) = dict.atoms().shape();
    let m = signals.cols();
    if signals.rows() != d || codes.shape() != (k, m) {
        return Err(Error::shape(format!(
            "dictionary {d}x{k}, signals {:?}, codes {:?}",
            signals.shape(),
            codes.shape()
        )));
    }

    let mut atoms = dict.atoms().clone();
    let mut codes = codes.clone();
    let mut residual = signals.sub(&matmul(&atoms, &codes)?)?;
    let mut replaced = Vec::new();
    let mut used_for_replacement = vec![false; m];

    for a in 0..k {
        let omega: Vec<usize> = (0..m).filter(|&i| codes.get(a, i) != 0.0).collect();
        let atom = atoms.column(a);

        if omega.is_empty() {
            if policy == UnusedAtomPolicy::ReplaceWithWorstResidual {
                let worst = (0..m)
                    .filter(|&i| !used_for_replacement[i])
                    .map(|i| (i, norm_l2(&residual.column(i))))
                    .filter(|&(_, r)| r > 0.0)
                    .fold(None, |acc: Option<(usize, f64)>, (i, r)| match acc {
                        Some((_, best)) if best >= r => acc,
                        _ => Some((i, r)),
                    });
                if let Some((i, _)) = worst {
                    let y = signals.column(i);
                    let n = norm_l2(&y);
                    if n > 0.0 {
                        used_for_replacement[i] = true;
                        let unit: Vec<f64> = y.iter().map(|v| v / n).collect();
                        atoms.set_column(a, &unit);
                        replaced.push(a);
                    }
                }
            }
            continue;
        }

        // E_a restricted to ω: residual plus this atom's own contribution.
        let restricted = Matrix::from_fn(d, omega.len(), |r, c| {
            let i = omega[c];
            residual.get(r, i) + atom[r] * codes.get(a, i)
        })?;
        let svd = thin_svd(&restricted)?;
        let sigma = svd.singular_values[0];
        if sigma == 0.0 {
            // Nothing left to explain on this support.
            for (c, &i) in omega.iter().enumerate() {
                codes.set(a, i, 0.0);
                for r in 0..d {
                    residual.set(r, i, restricted.get(r, c));
                }
            }
            continue;
        }
        let mut u = svd.u.column(0);
        let mut v: Vec<f64> = svd.vt.row(0).to_vec();
        if leading_entry(&u) < 0.0 {
            u.iter_mut().for_each(|x| *x = -*x);
            v.iter_mut().for_each(|x| *x = -*x);
        }
        let un = norm_l2(&u);
        u.iter_mut().for_each(|x| *x /= un);
        atoms.set_column(a, &u);
        for (c, &i) in omega.iter().enumerate() {
            let coef = sigma * v[c];
            codes.set(a, i, coef);
            for r in 0..d {
                residual.set(r, i, restricted.get(r, c) - u[r] * coef);
            }
        }
    }

    Ok(DictionaryUpdate {
        dictionary: Dictionary::from_unit_columns(atoms)?,
        codes,
        replaced,
    })
}

/// Entry of largest magnitude (first on ties).
fn leading_entry(v: &[f64]) -> f64 {
    let mut best = 0.0f64;
    for &x in v {
        if x.abs() > best.abs() {
            best = x;
        }
    }
    best
}

/// Reconstruction errors observed inside one k-SVD sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepErrors {
    pub after_coding: f64,
    /// Equal to `after_coding` when the dictionary is not updated.
    pub after_update: f64,
}

#[derive(Debug, Clone)]
pub struct KsvdOutput {
    pub dictionary: Dictionary,
    /// K × M.
    pub codes: Matrix,
    /// Frobenius reconstruction error at the end of each sweep.
    pub error_trace: Vec<f64>,
    pub sweeps: Vec<SweepErrors>,
}

/// Runs exactly `cfg.sweeps` rounds of coding followed, when enabled, by a
/// dictionary update.
pub fn ksvd_run(signals: &Matrix, init: &Dictionary, cfg: &KsvdConfig) -> Result<KsvdOutput> {
    cfg.validate(init.len())?;
    let mut dict = init.clone();
    let mut codes = Matrix::zeros(init.len(), signals.cols());
    let mut error_trace = Vec::with_capacity(cfg.sweeps);
    let mut sweeps = Vec::with_capacity(cfg.sweeps);

    for _ in 0..cfg.sweeps {
        codes = batch_encode(&dict, signals, cfg)?;
        let after_coding = reconstruction_error(&dict, signals, &codes)?;
        let mut after_update = after_coding;
        if cfg.update_dictionary {
            let upd = ksvd_dictionary_update(&dict, signals, &codes, cfg.unused_atom_policy)?;
            dict = upd.dictionary;
            codes = upd.codes;
            after_update = reconstruction_error(&dict, signals, &codes)?;
        }
        error_trace.push(after_update);
        sweeps.push(SweepErrors {
            after_coding,
            after_update,
        });
    }

    Ok(KsvdOutput {
        dictionary: dict,
        codes,
        error_trace,
        sweeps,
    })
}
