use nalgebra::DMatrix;

use super::{
    check_len, NetworkError, NetworkShape, Parameters, SequenceSample, StateMode, StatePolicy,
};
use crate::qgs::ResidualMap;

/// Hidden-layer activation.
pub fn activation(x: f64) -> f64 {
    x.tanh()
}

/// One network step: `z = tanh(W u + P z_prev)`, `ŷ = V z`.
pub fn step(
    params: &Parameters,
    u: &[f64],
    z_prev: &[f64],
) -> Result<(Vec<f64>, Vec<f64>), NetworkError> {
    let shape = params.shape();
    check_len("input u", shape.n, u.len())?;
    check_len("previous state", shape.hidden, z_prev.len())?;
    let z: Vec<f64> = (0..shape.hidden)
        .map(|j| {
            let a: f64 = (0..shape.n).map(|l| params.w[(j, l)] * u[l]).sum::<f64>()
                + params.p[j] * z_prev[j];
            activation(a)
        })
        .collect();
    let y = (0..shape.q)
        .map(|k| (0..shape.hidden).map(|j| params.v[(k, j)] * z[j]).sum())
        .collect();
    Ok((z, y))
}

pub(crate) fn validate_samples(
    shape: NetworkShape,
    samples: &[SequenceSample],
) -> Result<(), NetworkError> {
    for s in samples {
        if s.inputs.is_empty() {
            return Err(NetworkError::EmptySequence { id: s.id.clone() });
        }
        for u in &s.inputs {
            check_len("sample input", shape.n, u.len())?;
        }
        check_len("sample target", shape.q, s.target.len())?;
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `[w_j · u]` for every row `j` of the row-major `w`, four rows per sweep
/// over `u`.
fn matvec(w: &[f64], n: usize, u: &[f64], out: &mut [f64]) {
    let m = out.len();
    let mut j = 0;
    while j + 4 <= m {
        let (r0, r1, r2, r3) = (
            &w[j * n..(j + 1) * n],
            &w[(j + 1) * n..(j + 2) * n],
            &w[(j + 2) * n..(j + 3) * n],
            &w[(j + 3) * n..(j + 4) * n],
        );
        let mut acc = [[0.0f64; 2]; 4];
        let pairs = n / 2;
        for k in 0..pairs {
            let l = 2 * k;
            let (u0, u1) = (u[l], u[l + 1]);
            acc[0][0] += r0[l] * u0;
            acc[0][1] += r0[l + 1] * u1;
            acc[1][0] += r1[l] * u0;
            acc[1][1] += r1[l + 1] * u1;
            acc[2][0] += r2[l] * u0;
            acc[2][1] += r2[l + 1] * u1;
            acc[3][0] += r3[l] * u0;
            acc[3][1] += r3[l + 1] * u1;
        }
        let mut sums = [
            acc[0][0] + acc[0][1],
            acc[1][0] + acc[1][1],
            acc[2][0] + acc[2][1],
            acc[3][0] + acc[3][1],
        ];
        if n % 2 == 1 {
            let l = n - 1;
            sums[0] += r0[l] * u[l];
            sums[1] += r1[l] * u[l];
            sums[2] += r2[l] * u[l];
            sums[3] += r3[l] * u[l];
        }
        out[j..j + 4].copy_from_slice(&sums);
        j += 4;
    }
    for (jj, o) in out.iter_mut().enumerate().skip(j) {
        *o = dot(&w[jj * n..(jj + 1) * n], u);
    }
}

/// `g_j += a_j u` for every row `j` of the row-major `g`, four rows per
/// sweep over `u`.
fn rank_one_update(g: &mut [f64], n: usize, a: &[f64], u: &[f64]) {
    let m = a.len();
    let mut j = 0;
    while j + 4 <= m {
        let (a0, a1, a2, a3) = (a[j], a[j + 1], a[j + 2], a[j + 3]);
        let block = &mut g[j * n..(j + 4) * n];
        let (r0, rest) = block.split_at_mut(n);
        let (r1, rest) = rest.split_at_mut(n);
        let (r2, r3) = rest.split_at_mut(n);
        for l in 0..n {
            let ul = u[l];
            r0[l] += a0 * ul;
            r1[l] += a1 * ul;
            r2[l] += a2 * ul;
            r3[l] += a3 * ul;
        }
        j += 4;
    }
    for jj in j..m {
        if a[jj] != 0.0 {
            for (gl, ul) in g[jj * n..(jj + 1) * n].iter_mut().zip(u) {
                *gl += a[jj] * ul;
            }
        }
    }
}

/// Hidden states of a full pass over a sample list.
///
/// Steps are laid out sample after sample; `z` holds `m` values per step.
pub(crate) struct Trajectory {
    pub(crate) z: Vec<f64>,
    /// Hidden state feeding the first step of each sample.
    pub(crate) z_start: Vec<Vec<f64>>,
    pub(crate) outputs: Vec<f64>,
}

fn forward_flat(
    shape: NetworkShape,
    x: &[f64],
    samples: &[SequenceSample],
    mode: StateMode,
    z0: &[f64],
) -> Trajectory {
    let m = shape.hidden;
    let total: usize = samples.iter().map(|s| s.inputs.len()).sum();
    let mut z = vec![0.0; total * m];
    let mut z_start = Vec::with_capacity(samples.len());
    let mut outputs = vec![0.0; samples.len() * shape.q];
    let w = &x[shape.w_offset()..shape.w_offset() + m * shape.n];
    let p = &x[shape.p_index(0)..shape.p_index(0) + m];
    let mut carry = z0.to_vec();
    let mut pos = 0;
    for (i, s) in samples.iter().enumerate() {
        if mode == StateMode::ResetPerSample {
            carry.copy_from_slice(z0);
        }
        z_start.push(carry.clone());
        for u in &s.inputs {
            let zk = &mut z[pos * m..(pos + 1) * m];
            matvec(w, shape.n, u, zk);
            for j in 0..m {
                zk[j] = activation(zk[j] + p[j] * carry[j]);
            }
            carry.copy_from_slice(zk);
            pos += 1;
        }
        let out = &mut outputs[i * shape.q..(i + 1) * shape.q];
        for (k, o) in out.iter_mut().enumerate() {
            *o = (0..m).map(|j| x[shape.v_index(k, j)] * carry[j]).sum();
        }
    }
    Trajectory {
        z,
        z_start,
        outputs,
    }
}

fn residuals_from(traj: &Trajectory, samples: &[SequenceSample], q: usize, out: &mut [f64]) {
    for (i, s) in samples.iter().enumerate() {
        for k in 0..q {
            out[i * q + k] = traj.outputs[i * q + k] - s.target[k];
        }
    }
}

/// Writes `D h(x)ᵀ wts` into `grad` by back-propagation through time.
fn vjp_flat(
    shape: NetworkShape,
    x: &[f64],
    samples: &[SequenceSample],
    mode: StateMode,
    traj: &Trajectory,
    wts: &[f64],
    grad: &mut [f64],
) {
    let m = shape.hidden;
    let q = shape.q;
    grad.fill(0.0);
    let p = &x[shape.p_index(0)..shape.p_index(0) + m];
    let mut dz = vec![0.0; m];
    let mut da = vec![0.0; m];
    let mut pos: usize = samples.iter().map(|s| s.inputs.len()).sum();
    for (i, s) in samples.iter().enumerate().rev() {
        if mode == StateMode::ResetPerSample {
            dz.fill(0.0);
        }
        let wi = &wts[i * q..(i + 1) * q];
        let z_last = &traj.z[(pos - 1) * m..pos * m];
        for j in 0..m {
            let mut acc = 0.0;
            for k in 0..q {
                let idx = shape.v_index(k, j);
                grad[idx] += wi[k] * z_last[j];
                acc += x[idx] * wi[k];
            }
            dz[j] += acc;
        }
        for (step, u) in s.inputs.iter().enumerate().rev() {
            let k = pos - 1;
            let zk = &traj.z[k * m..(k + 1) * m];
            let z_prev: &[f64] = if step == 0 {
                &traj.z_start[i]
            } else {
                &traj.z[(k - 1) * m..k * m]
            };
            for j in 0..m {
                da[j] = dz[j] * (1.0 - zk[j] * zk[j]);
                grad[shape.p_index(j)] += da[j] * z_prev[j];
                dz[j] = p[j] * da[j];
            }
            let w0 = shape.w_offset();
            rank_one_update(&mut grad[w0..w0 + m * shape.n], shape.n, &da, u);
            pos -= 1;
        }
    }
}

/// Analytic residual Jacobian via forward sensitivities `S_k = ∂z(k)/∂x`.
fn jacobian_flat(
    shape: NetworkShape,
    x: &[f64],
    samples: &[SequenceSample],
    mode: StateMode,
    z0: &[f64],
    jac: &mut DMatrix<f64>,
) {
    let m = shape.hidden;
    let q = shape.q;
    let np = shape.param_count();
    let w = &x[shape.w_offset()..shape.w_offset() + m * shape.n];
    let p = &x[shape.p_index(0)..shape.p_index(0) + m];
    jac.fill(0.0);
    // Row-major m × n_p sensitivity of the carried state.
    let mut sens = vec![0.0; m * np];
    let mut next = vec![0.0; m * np];
    let mut carry = z0.to_vec();
    let mut z = vec![0.0; m];
    for (i, s) in samples.iter().enumerate() {
        if mode == StateMode::ResetPerSample {
            carry.copy_from_slice(z0);
            sens.fill(0.0);
        }
        for u in &s.inputs {
            for j in 0..m {
                z[j] = activation(dot(&w[j * shape.n..(j + 1) * shape.n], u) + p[j] * carry[j]);
            }
            for j in 0..m {
                let d = 1.0 - z[j] * z[j];
                let row = &mut next[j * np..(j + 1) * np];
                for (r, sv) in row.iter_mut().zip(&sens[j * np..(j + 1) * np]) {
                    *r = d * p[j] * sv;
                }
                for (l, ul) in u.iter().enumerate() {
                    row[shape.w_index(j, l)] += d * ul;
                }
                row[shape.p_index(j)] += d * carry[j];
            }
            std::mem::swap(&mut sens, &mut next);
            carry.copy_from_slice(&z);
        }
        for k in 0..q {
            let r = i * q + k;
            for j in 0..m {
                jac[(r, shape.v_index(k, j))] += carry[j];
                let vkj = x[shape.v_index(k, j)];
                if vkj != 0.0 {
                    for c in 0..np {
                        jac[(r, c)] += vkj * sens[j * np + c];
                    }
                }
            }
        }
    }
}

/// Stacked final-step errors `ŷ(i) − y(i)`, sample-major.
pub fn residuals(
    params: &Parameters,
    samples: &[SequenceSample],
    policy: &StatePolicy,
) -> Result<Vec<f64>, NetworkError> {
    let shape = params.shape();
    validate_samples(shape, samples)?;
    let z0 = policy.initial_state(shape.hidden)?;
    let traj = forward_flat(shape, &params.flatten(), samples, policy.mode, &z0);
    let mut out = vec![0.0; samples.len() * shape.q];
    residuals_from(&traj, samples, shape.q, &mut out);
    Ok(out)
}

/// Sum of squared final-step errors.
pub fn sse(
    params: &Parameters,
    samples: &[SequenceSample],
    policy: &StatePolicy,
) -> Result<f64, NetworkError> {
    Ok(residuals(params, samples, policy)?
        .iter()
        .map(|e| e * e)
        .sum())
}

/// `∂h/∂x`, `q·N × n_p`, columns in flattened-parameter order.
pub fn residual_jacobian(
    params: &Parameters,
    samples: &[SequenceSample],
    policy: &StatePolicy,
) -> Result<DMatrix<f64>, NetworkError> {
    let shape = params.shape();
    validate_samples(shape, samples)?;
    let z0 = policy.initial_state(shape.hidden)?;
    let mut jac = DMatrix::zeros(samples.len() * shape.q, shape.param_count());
    jacobian_flat(
        shape,
        &params.flatten(),
        samples,
        policy.mode,
        &z0,
        &mut jac,
    );
    Ok(jac)
}

/// Network residuals over a fixed sample list as a [`ResidualMap`] on the
/// flattened parameter vector.
pub struct NetworkResiduals {
    shape: NetworkShape,
    samples: Vec<SequenceSample>,
    mode: StateMode,
    z0: Vec<f64>,
}

impl NetworkResiduals {
    pub fn new(
        shape: NetworkShape,
        samples: Vec<SequenceSample>,
        policy: &StatePolicy,
    ) -> Result<Self, NetworkError> {
        validate_samples(shape, &samples)?;
        let z0 = policy.initial_state(shape.hidden)?;
        Ok(Self {
            shape,
            samples,
            mode: policy.mode,
            z0,
        })
    }

    pub fn shape(&self) -> NetworkShape {
        self.shape
    }

    pub fn samples(&self) -> &[SequenceSample] {
        &self.samples
    }

    /// Raw network outputs at the final step of every sample.
    pub fn outputs(&self, x: &[f64]) -> Vec<f64> {
        forward_flat(self.shape, x, &self.samples, self.mode, &self.z0).outputs
    }
}

impl ResidualMap for NetworkResiduals {
    fn input_dim(&self) -> usize {
        self.shape.param_count()
    }

    fn output_dim(&self) -> usize {
        self.samples.len() * self.shape.q
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) {
        let traj = forward_flat(self.shape, x, &self.samples, self.mode, &self.z0);
        residuals_from(&traj, &self.samples, self.shape.q, out);
    }

    fn jacobian(&self, x: &[f64], jac: &mut DMatrix<f64>) {
        jacobian_flat(self.shape, x, &self.samples, self.mode, &self.z0, jac);
    }

    fn vjp(&self, x: &[f64], w: &[f64], grad: &mut [f64]) {
        let traj = forward_flat(self.shape, x, &self.samples, self.mode, &self.z0);
        vjp_flat(self.shape, x, &self.samples, self.mode, &traj, w, grad);
    }

    fn residual_and_gradient(&self, x: &[f64], h: &mut [f64], grad: &mut [f64]) {
        let traj = forward_flat(self.shape, x, &self.samples, self.mode, &self.z0);
        residuals_from(&traj, &self.samples, self.shape.q, h);
        vjp_flat(self.shape, x, &self.samples, self.mode, &traj, h, grad);
    }
}
