//! The prototype-based evidential output layer.
//!
//! Each P-dimensional feature vector is compared against n prototypes. The
//! similarity to prototype l is s^l = α^l·exp(−(η^l·d^l)²) with d^l the
//! Euclidean distance; prototype l then emits the mass function
//! m^l({ωj}) = v^l_j·s^l, m^l(Ω) = 1 − s^l, where v^l is its class
//! membership profile. The n mass functions are conjunctively combined in
//! one sweep and normalized once at the end.
//!
//! The constrained parameters are reparameterized for unconstrained
//! optimization: α^l = sigmoid(ξ^l) and v^l_j = (δ^l_j)²/Σ_{j'}(δ^l_{j'})².
//! The backward pass reverse-accumulates through the combination recursion
//! using per-step partial products cached during the forward pass; it is
//! validated against central finite differences.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::belief::MassVector;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Parameters of the evidential layer: n prototypes in feature space with
/// per-prototype scale, reliability, and class-membership parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    n: usize,
    p: usize,
    m: usize,
    prototypes: Vec<f64>, // n×P row-major
    eta: Vec<f64>,        // n
    xi: Vec<f64>,         // n
    delta: Vec<f64>,      // n×M row-major
}

impl PrototypeBank {
    /// Builds a bank from raw parameter vectors.
    pub fn new(
        n: usize,
        p: usize,
        m: usize,
        prototypes: Vec<f64>,
        eta: Vec<f64>,
        xi: Vec<f64>,
        delta: Vec<f64>,
    ) -> Result<PrototypeBank> {
        if n == 0 || p == 0 || m < 2 {
            return Err(Error::Contract(format!(
                "prototype bank needs n ≥ 1, P ≥ 1, M ≥ 2 (got n={n}, P={p}, M={m})"
            )));
        }
        let checks = [
            ("prototypes", prototypes.len(), n * p),
            ("eta", eta.len(), n),
            ("xi", xi.len(), n),
            ("delta", delta.len(), n * m),
        ];
        for (context, got, expected) in checks {
            if got != expected {
                return Err(Error::Dimension {
                    context: match context {
                        "prototypes" => "prototype bank prototypes",
                        "eta" => "prototype bank eta",
                        "xi" => "prototype bank xi",
                        _ => "prototype bank delta",
                    },
                    expected,
                    got,
                });
            }
        }
        let bank = PrototypeBank {
            n,
            p,
            m,
            prototypes,
            eta,
            xi,
            delta,
        };
        bank.validate()?;
        Ok(bank)
    }

    /// Random initialization: prototype coordinates ~ N(0, 1/√P), η = 0.5,
    /// ξ = 0 (α = 0.5), δ ~ N(0, 1) with degenerate rows redrawn.
    pub fn init_random<R: Rng + ?Sized>(n: usize, p: usize, m: usize, rng: &mut R) -> Result<PrototypeBank> {
        if n == 0 || p == 0 || m < 2 {
            return Err(Error::Contract(format!(
                "prototype bank needs n ≥ 1, P ≥ 1, M ≥ 2 (got n={n}, P={p}, M={m})"
            )));
        }
        let proto_dist = Normal::new(0.0, 1.0 / (p as f64).sqrt()).expect("valid normal");
        let delta_dist = Normal::new(0.0, 1.0).expect("valid normal");
        let prototypes: Vec<f64> = (0..n * p).map(|_| proto_dist.sample(rng)).collect();
        let mut delta = vec![0.0; n * m];
        for row in delta.chunks_mut(m) {
            loop {
                row.iter_mut().for_each(|v| *v = delta_dist.sample(rng));
                if row.iter().map(|v| v * v).sum::<f64>() >= 1e-6 {
                    break;
                }
            }
        }
        Ok(PrototypeBank {
            n,
            p,
            m,
            prototypes,
            eta: vec![0.5; n],
            xi: vec![0.0; n],
            delta,
        })
    }

    pub fn prototype_count(&self) -> usize {
        self.n
    }

    pub fn feature_dim(&self) -> usize {
        self.p
    }

    pub fn class_count(&self) -> usize {
        self.m
    }

    pub fn prototype(&self, l: usize) -> &[f64] {
        &self.prototypes[l * self.p..(l + 1) * self.p]
    }

    pub fn prototypes(&self) -> &[f64] {
        &self.prototypes
    }

    pub fn eta(&self) -> &[f64] {
        &self.eta
    }

    pub fn xi(&self) -> &[f64] {
        &self.xi
    }

    pub fn delta(&self) -> &[f64] {
        &self.delta
    }

    pub fn prototypes_mut(&mut self) -> &mut [f64] {
        &mut self.prototypes
    }

    pub fn eta_mut(&mut self) -> &mut [f64] {
        &mut self.eta
    }

    pub fn xi_mut(&mut self) -> &mut [f64] {
        &mut self.xi
    }

    pub fn delta_mut(&mut self) -> &mut [f64] {
        &mut self.delta
    }

    /// Reliability α^l = sigmoid(ξ^l) ∈ (0, 1).
    pub fn alpha(&self, l: usize) -> f64 {
        sigmoid(self.xi[l])
    }

    /// Class memberships v^l (non-negative, summing to 1).
    pub fn memberships(&self, l: usize) -> Vec<f64> {
        let row = &self.delta[l * self.m..(l + 1) * self.m];
        let total: f64 = row.iter().map(|d| d * d).sum();
        row.iter().map(|d| d * d / total).collect()
    }

    /// Checks that every parameter is finite and no membership row is
    /// degenerate. Reports the flat index of the first offender.
    pub fn validate(&self) -> Result<()> {
        let groups: [(&str, &[f64]); 4] = [
            ("prototypes", &self.prototypes),
            ("eta", &self.eta),
            ("xi", &self.xi),
            ("delta", &self.delta),
        ];
        for (what, values) in groups {
            if let Some(i) = values.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    what: format!("prototype bank {what}"),
                    index: i,
                });
            }
        }
        for l in 0..self.n {
            let row = &self.delta[l * self.m..(l + 1) * self.m];
            if row.iter().map(|d| d * d).sum::<f64>() <= 0.0 {
                return Err(Error::Contract(format!(
                    "membership row {l} is all zero; v^l is undefined"
                )));
            }
        }
        Ok(())
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.n * self.p + self.n + self.n + self.n * self.m
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Everything the backward pass needs from a forward evaluation.
#[derive(Clone, Debug)]
pub struct DsForwardTrace {
    distances: Vec<f64>,    // d^l, n
    similarities: Vec<f64>, // s^l, n
    exp_factors: Vec<f64>,  // exp(−(η^l d^l)²), n
    masses: Vec<f64>,       // m^l, n×(M+1): singletons then Ω per prototype
    partials: Vec<f64>,     // μ^l, n×(M+1): running combinations
    total: f64,             // total mass of μ^n before normalization
}

impl DsForwardTrace {
    pub fn distances(&self) -> &[f64] {
        &self.distances
    }

    pub fn similarities(&self) -> &[f64] {
        &self.similarities
    }

    /// Mass function emitted by prototype `l` before combination.
    pub fn prototype_mass(&self, l: usize) -> MassVector {
        let m = self.masses.len() / self.distances.len() - 1;
        let row = &self.masses[l * (m + 1)..(l + 1) * (m + 1)];
        MassVector::new(row[..m].to_vec(), row[m]).expect("trace masses are valid")
    }

    /// Combined mass function before the final normalization.
    pub fn unnormalized_total(&self) -> MassVector {
        let n = self.distances.len();
        let m = self.masses.len() / n - 1;
        let row = &self.partials[(n - 1) * (m + 1)..n * (m + 1)];
        MassVector::new(row[..m].to_vec(), row[m]).expect("trace masses are valid")
    }

    fn class_count(&self) -> usize {
        self.masses.len() / self.distances.len() - 1
    }
}

/// Gradients with the same shape as a [`PrototypeBank`].
#[derive(Clone, Debug, PartialEq)]
pub struct BankGrads {
    pub prototypes: Vec<f64>,
    pub eta: Vec<f64>,
    pub xi: Vec<f64>,
    pub delta: Vec<f64>,
}

impl BankGrads {
    pub fn zeros_like(bank: &PrototypeBank) -> BankGrads {
        BankGrads {
            prototypes: vec![0.0; bank.n * bank.p],
            eta: vec![0.0; bank.n],
            xi: vec![0.0; bank.n],
            delta: vec![0.0; bank.n * bank.m],
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self
            .prototypes
            .iter_mut()
            .chain(self.eta.iter_mut())
            .chain(self.xi.iter_mut())
            .chain(self.delta.iter_mut())
        {
            *v *= factor;
        }
    }
}

/// Maps one feature vector to a normalized mass function.
///
/// Runs the three steps — per-prototype similarities, per-prototype mass
/// functions, iterative conjunctive combination — and normalizes the result
/// once. The returned trace caches everything [`ds_backward`] needs.
pub fn ds_forward(x: &[f64], bank: &PrototypeBank) -> Result<(MassVector, DsForwardTrace)> {
    bank.validate()?;
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "feature vector".into(),
            index: i,
        });
    }
    ds_forward_unchecked(x, bank)
}

/// Forward pass without the up-front finiteness scans; the bank and input
/// must already be validated. Used by the per-pixel map and training loops,
/// which validate once per image instead of once per pixel.
pub(crate) fn ds_forward_unchecked(
    x: &[f64],
    bank: &PrototypeBank,
) -> Result<(MassVector, DsForwardTrace)> {
    if x.len() != bank.p {
        return Err(Error::Dimension {
            context: "feature vector length",
            expected: bank.p,
            got: x.len(),
        });
    }
    let (n, m) = (bank.n, bank.m);
    let width = m + 1;
    let mut distances = vec![0.0; n];
    let mut similarities = vec![0.0; n];
    let mut exp_factors = vec![0.0; n];
    let mut masses = vec![0.0; n * width];
    let mut partials = vec![0.0; n * width];

    for l in 0..n {
        let proto = &bank.prototypes[l * bank.p..(l + 1) * bank.p];
        let d2: f64 = x
            .iter()
            .zip(proto)
            .map(|(xi, pi)| (xi - pi) * (xi - pi))
            .sum();
        let eta = bank.eta[l];
        let e = (-(eta * eta) * d2).exp();
        let s = sigmoid(bank.xi[l]) * e;
        distances[l] = d2.sqrt();
        exp_factors[l] = e;
        similarities[l] = s;

        let drow = &bank.delta[l * m..(l + 1) * m];
        let t: f64 = drow.iter().map(|d| d * d).sum();
        let mrow = &mut masses[l * width..(l + 1) * width];
        for j in 0..m {
            mrow[j] = drow[j] * drow[j] / t * s;
        }
        mrow[m] = 1.0 - s;
    }

    // Iterative combination: μ^1 = m^1, then fold in m^2..m^n.
    partials[..width].copy_from_slice(&masses[..width]);
    for l in 1..n {
        let (prev_rows, rest) = partials.split_at_mut(l * width);
        let prev = &prev_rows[(l - 1) * width..];
        let cur = &mut rest[..width];
        let mrow = &masses[l * width..(l + 1) * width];
        let (m_omega, prev_omega) = (mrow[m], prev[m]);
        for j in 0..m {
            cur[j] = prev[j] * (mrow[j] + m_omega) + prev_omega * mrow[j];
        }
        cur[m] = prev_omega * m_omega;
    }

    let final_row = &partials[(n - 1) * width..n * width];
    let total: f64 = final_row.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::DegenerateEvidence);
    }
    let output = MassVector::new(
        final_row[..m].iter().map(|v| v / total).collect(),
        final_row[m] / total,
    )?;
    let trace = DsForwardTrace {
        distances,
        similarities,
        exp_factors,
        masses,
        partials,
        total,
    };
    Ok((output, trace))
}

/// Gradients of a scalar loss w.r.t. every bank parameter and the input,
/// given the loss gradient w.r.t. the normalized output masses.
///
/// Allocates fresh gradient buffers; the training loop uses
/// [`ds_backward_into`] to accumulate across pixels instead.
pub fn ds_backward(
    grad_out: &[f64],
    trace: &DsForwardTrace,
    x: &[f64],
    bank: &PrototypeBank,
) -> Result<(BankGrads, Vec<f64>)> {
    let mut grads = BankGrads::zeros_like(bank);
    let mut grad_x = vec![0.0; bank.p];
    ds_backward_into(grad_out, trace, x, bank, &mut grads, &mut grad_x)?;
    Ok((grads, grad_x))
}

/// As [`ds_backward`], but accumulates (+=) into caller-owned buffers.
pub fn ds_backward_into(
    grad_out: &[f64],
    trace: &DsForwardTrace,
    x: &[f64],
    bank: &PrototypeBank,
    grads: &mut BankGrads,
    grad_x: &mut [f64],
) -> Result<()> {
    let (n, m, p) = (bank.n, bank.m, bank.p);
    let width = m + 1;
    if grad_out.len() != width {
        return Err(Error::Dimension {
            context: "mass gradient length",
            expected: width,
            got: grad_out.len(),
        });
    }
    if trace.distances.len() != n || trace.class_count() != m || x.len() != p {
        return Err(Error::Contract(
            "trace does not match this bank/input (stale trace?)".into(),
        ));
    }
    if grad_x.len() != p {
        return Err(Error::Dimension {
            context: "input gradient length",
            expected: p,
            got: grad_x.len(),
        });
    }

    // Normalization backward: out = μ/S ⇒ ∂L/∂μ_k = (g_k − ⟨g, out⟩)/S.
    let s_total = trace.total;
    let final_row = &trace.partials[(n - 1) * width..n * width];
    let dot: f64 = grad_out
        .iter()
        .zip(final_row)
        .map(|(g, mu)| g * (mu / s_total))
        .sum();
    let mut g_mu: Vec<f64> = grad_out.iter().map(|g| (g - dot) / s_total).collect();

    // Reverse sweep through μ^l = μ^{l−1} ⊕ m^l, down to μ^1 = m^1.
    let mut g_prev = vec![0.0; width];
    let mut g_m = vec![0.0; width];
    for l in (0..n).rev() {
        if l == 0 {
            g_m.copy_from_slice(&g_mu);
        } else {
            let mrow = &trace.masses[l * width..(l + 1) * width];
            let prev = &trace.partials[(l - 1) * width..l * width];
            let (m_omega, prev_omega) = (mrow[m], prev[m]);
            let mut g_prev_omega = g_mu[m] * m_omega;
            let mut g_m_omega = g_mu[m] * prev_omega;
            for j in 0..m {
                g_prev[j] = g_mu[j] * (mrow[j] + m_omega);
                g_prev_omega += g_mu[j] * mrow[j];
                g_m[j] = g_mu[j] * (prev[j] + prev_omega);
                g_m_omega += g_mu[j] * prev[j];
            }
            g_prev[m] = g_prev_omega;
            g_m[m] = g_m_omega;
        }

        // Through m^l_j = v_j·s and m^l_Ω = 1 − s for prototype l.
        let s = trace.similarities[l];
        let e = trace.exp_factors[l];
        let alpha = sigmoid(bank.xi[l]);
        let drow = &bank.delta[l * m..(l + 1) * m];
        let t: f64 = drow.iter().map(|d| d * d).sum();

        let mut g_s = -g_m[m];
        let mut gv_dot_v = 0.0;
        for j in 0..m {
            let v_j = drow[j] * drow[j] / t;
            g_s += g_m[j] * v_j;
            gv_dot_v += g_m[j] * s * v_j;
        }
        for j in 0..m {
            // ∂v_j/∂δ_k folded: Gδ_k = (2δ_k/T)(Gv_k − Σ_j Gv_j·v_j).
            let gv_j = g_m[j] * s;
            grads.delta[l * m + j] += 2.0 * drow[j] / t * (gv_j - gv_dot_v);
        }

        // s = α·e with e = exp(−η²·d²).
        let g_alpha = g_s * e;
        grads.xi[l] += g_alpha * alpha * (1.0 - alpha);
        let g_e = g_s * alpha;
        let eta = bank.eta[l];
        let d2 = trace.distances[l] * trace.distances[l];
        grads.eta[l] += g_e * e * (-2.0 * eta * d2);
        let g_d2 = g_e * e * (-(eta * eta));

        let proto = &bank.prototypes[l * p..(l + 1) * p];
        for t_i in 0..p {
            let diff = x[t_i] - proto[t_i];
            grad_x[t_i] += g_d2 * 2.0 * diff;
            grads.prototypes[l * p + t_i] += g_d2 * (-2.0) * diff;
        }

        if l > 0 {
            g_mu.copy_from_slice(&g_prev);
        }
    }
    Ok(())
}

/// Applies [`ds_forward`] at every pixel of a feature map.
///
/// Returns the H×W×(M+1) mass tensor together with the per-pixel traces in
/// row-major pixel order.
pub fn ds_forward_map(
    features: &Tensor,
    bank: &PrototypeBank,
) -> Result<(Tensor, Vec<DsForwardTrace>)> {
    let (h, w, c) = features.dims3()?;
    if c != bank.p {
        return Err(Error::Dimension {
            context: "feature map channels",
            expected: bank.p,
            got: c,
        });
    }
    bank.validate()?;
    if let Some(i) = features.first_non_finite() {
        return Err(Error::NonFinite {
            what: "feature map".into(),
            index: i,
        });
    }
    let width = bank.m + 1;
    let mut out = Tensor::zeros(&[h, w, width])?;
    let mut traces = Vec::with_capacity(h * w);
    for y in 0..h {
        for x_i in 0..w {
            let base = features.idx3(y, x_i, 0);
            let feat = &features.data()[base..base + c];
            let (mass, trace) = ds_forward_unchecked(feat, bank)?;
            let obase = out.idx3(y, x_i, 0);
            let orow = &mut out.data_mut()[obase..obase + width];
            orow[..bank.m].copy_from_slice(mass.singletons());
            orow[bank.m] = mass.omega_mass();
            traces.push(trace);
        }
    }
    Ok((out, traces))
}
