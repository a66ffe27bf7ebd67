//! The layered objective, the alternating proximal training loop and the
//! out-of-sample encoder.
//!
//! Reductions over samples (Gram matrices, objective terms) always run in
//! ascending [`Sample::id`] order, so training is invariant to the order in
//! which samples are supplied, bit for bit.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use crate::conv::{ChannelBlock, CoefficientStack, KernelBank, Sample};
use crate::conv::{layer_forward, materialize_toeplitz, LayerInput};
use crate::error::{invalid, Error, Result};
use crate::prox::{
    log_det_sv, projected_newton_coeffs, separable_coeff_update, CoefficientProblem, Coupling,
    NewtonSettings, TransformUpdateInputs,
};

/// Inner majorize-minimize passes for a transform whose channels have
/// different Gram matrices (layers 2 and up).
const TRANSFORM_MM_ITERS: usize = 100;
const TRANSFORM_MM_TOL: f64 = 1e-12;
const MIN_INIT_SINGULAR_VALUE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub num_layers: usize,
    /// Number of kernels per layer, which is also the kernel length.
    pub num_kernels: usize,
    pub mu: f64,
    pub lambda: f64,
    pub beta: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub max_outer_iters: usize,
    pub objective_tol: f64,
    pub seed: u64,
    /// Scale `eps` of the random perturbation in `T = I + eps * R`.
    pub init_scale: f64,
    pub newton: NewtonSettings,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 3,
            num_kernels: 8,
            mu: 0.01,
            lambda: 0.01,
            beta: 0.01,
            gamma1: 1.0,
            gamma2: 1.0,
            max_outer_iters: 100,
            objective_tol: 1e-6,
            seed: 0,
            init_scale: 0.1,
            newton: NewtonSettings::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(invalid(format!("{name} must be finite and positive, got {v}")))
            }
        };
        let nonneg = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(invalid(format!("{name} must be finite and non-negative, got {v}")))
            }
        };
        if self.num_layers == 0 {
            return Err(invalid("num_layers must be positive"));
        }
        if self.num_kernels == 0 {
            return Err(invalid("num_kernels must be positive"));
        }
        if self.max_outer_iters == 0 {
            return Err(invalid("max_outer_iters must be positive"));
        }
        nonneg("mu", self.mu)?;
        positive("lambda", self.lambda)?;
        nonneg("beta", self.beta)?;
        positive("gamma1", self.gamma1)?;
        positive("gamma2", self.gamma2)?;
        nonneg("objective_tol", self.objective_tol)?;
        nonneg("init_scale", self.init_scale)?;
        self.newton.validate()
    }
}

/// One recorded objective value. `layer == 0` marks the value at
/// initialization; otherwise it is the 1-based layer just updated.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iter: usize,
    pub layer: usize,
    pub objective: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub transforms: Vec<KernelBank>,
    pub config: ModelConfig,
    pub training_trace: Vec<TraceEntry>,
    /// `(M, N)`: number of training samples and signal length.
    pub data_dims: (usize, usize),
}

impl TrainedModel {
    pub fn num_layers(&self) -> usize {
        self.transforms.len()
    }

    pub fn signal_len(&self) -> usize {
        self.data_dims.1
    }

    pub fn final_objective(&self) -> Option<f64> {
        self.training_trace.last().map(|e| e.objective)
    }
}

/// Checks that `data` is non-empty, rectangular and long enough for `k`;
/// returns the signal length.
pub fn check_data(data: &[Sample], k: usize) -> Result<usize> {
    let first = data.first().ok_or_else(|| invalid("no samples"))?;
    let n = first.len();
    if let Some(s) = data.iter().find(|s| s.len() != n) {
        return Err(invalid(format!(
            "sample {} has length {}, expected {n}",
            s.id,
            s.len()
        )));
    }
    if n < k {
        return Err(invalid(format!("signal length {n} is shorter than kernel length {k}")));
    }
    Ok(n)
}

/// Indices of `data` sorted by sample id; the reduction order for every
/// sum over samples.
pub fn reduction_order(data: &[Sample]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.sort_by_key(|&i| data[i].id);
    order
}

fn layer_input<'a>(data: &'a [Sample], prev: Option<&'a CoefficientStack>, m: usize) -> LayerInput<'a> {
    match prev {
        None => LayerInput::Signal(&data[m].values),
        Some(stack) => LayerInput::Channels(&stack.blocks[m]),
    }
}

/// Forward product of one layer for every sample (`prev = None` for the
/// first layer).
pub fn forward_layer(
    data: &[Sample],
    prev: Option<&CoefficientStack>,
    bank: &KernelBank,
) -> Result<CoefficientStack> {
    let blocks = (0..data.len())
        .into_par_iter()
        .map(|m| layer_forward(layer_input(data, prev, m), bank))
        .collect::<Result<Vec<_>>>()?;
    Ok(CoefficientStack { blocks })
}

fn check_stacks(
    transforms: &[KernelBank],
    coeffs: &[CoefficientStack],
    data: &[Sample],
    config: &ModelConfig,
) -> Result<()> {
    let l = config.num_layers;
    if transforms.len() != l || coeffs.len() != l {
        return Err(invalid(format!(
            "expected {l} layers, got {} transforms and {} coefficient stacks",
            transforms.len(),
            coeffs.len()
        )));
    }
    let k = config.num_kernels;
    let n = check_data(data, k)?;
    if let Some(t) = transforms.iter().find(|t| t.size() != k) {
        return Err(invalid(format!("transform is {}x{0}, expected {k}x{k}", t.size())));
    }
    if let Some(z) = coeffs.iter().find(|z| z.dims() != (data.len(), n, k)) {
        return Err(invalid(format!(
            "coefficient stack dims {:?}, expected {:?}",
            z.dims(),
            (data.len(), n, k)
        )));
    }
    Ok(())
}

fn layer_fit(
    data: &[Sample],
    prev: Option<&CoefficientStack>,
    bank: &KernelBank,
    coeffs: &CoefficientStack,
    order: &[usize],
) -> Result<f64> {
    let per_sample = (0..data.len())
        .into_par_iter()
        .map(|m| {
            let a = layer_forward(layer_input(data, prev, m), bank)?;
            Ok((a.0 - &coeffs.blocks[m].0).norm_squared())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(0.5 * order.iter().map(|&m| per_sample[m]).sum::<f64>())
}

fn regularizers(bank: &KernelBank, coeffs: &CoefficientStack, order: &[usize], config: &ModelConfig) -> f64 {
    let ld = log_det_sv(bank.matrix());
    if ld == f64::NEG_INFINITY {
        return f64::INFINITY;
    }
    let l1: f64 = order.iter().map(|&m| coeffs.blocks[m].0.sum()).sum();
    config.mu * bank.matrix().norm_squared() - config.lambda * ld + config.beta * l1
}

/// The training objective. `+inf` if any coefficient is negative or any
/// transform is singular.
pub fn objective(
    transforms: &[KernelBank],
    coeffs: &[CoefficientStack],
    data: &[Sample],
    config: &ModelConfig,
) -> Result<f64> {
    check_stacks(transforms, coeffs, data, config)?;
    if coeffs.iter().any(|z| z.iter().any(|&v| v < 0.0)) {
        return Ok(f64::INFINITY);
    }
    let order = reduction_order(data);
    let mut total = 0.0;
    for (l, (bank, z)) in transforms.iter().zip(coeffs).enumerate() {
        let prev = if l == 0 { None } else { Some(&coeffs[l - 1]) };
        total += layer_fit(data, prev, bank, z, &order)? + regularizers(bank, z, &order, config);
    }
    Ok(total)
}

/// Initial transforms `I + eps * R`, `R` uniform in `(-1, 1)`, redrawn until
/// the smallest singular value is at least 0.01.
pub fn init_transforms(config: &ModelConfig) -> Result<Vec<KernelBank>> {
    config.validate()?;
    let k = config.num_kernels;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut banks = Vec::with_capacity(config.num_layers);
    for _ in 0..config.num_layers {
        let bank = loop {
            let r = DMatrix::from_fn(k, k, |_, _| rng.random_range(-1.0..1.0));
            let t = DMatrix::identity(k, k) + r * config.init_scale;
            if t.singular_values().min() >= MIN_INIT_SINGULAR_VALUE {
                break t;
            }
        };
        banks.push(KernelBank(bank));
    }
    Ok(banks)
}

/// Initial transforms plus coefficients from a forward pass through them,
/// `Z_l = max(0, Z_{l-1} T_l)`, which is feasible by construction.
pub fn init_model(config: &ModelConfig, data: &[Sample]) -> Result<(Vec<KernelBank>, Vec<CoefficientStack>)> {
    let transforms = init_transforms(config)?;
    check_data(data, config.num_kernels)?;
    let mut coeffs: Vec<CoefficientStack> = Vec::with_capacity(transforms.len());
    for bank in &transforms {
        let mut z = forward_layer(data, coeffs.last(), bank)?;
        for b in &mut z.blocks {
            b.0.apply(|v| *v = v.max(0.0));
        }
        coeffs.push(z);
    }
    Ok((transforms, coeffs))
}

/// Per-channel Gram matrices of a layer's design operators. In the first
/// layer every channel sees the same Toeplitz view, so one Gram is shared.
enum LayerGram {
    Shared(DMatrix<f64>),
    PerChannel(Vec<DMatrix<f64>>),
}

/// Gram matrices and the cross term `sum_m D_{m,k}^T z_{m,k}` (column `k`)
/// for the transform update of one layer.
fn transform_statistics(
    data: &[Sample],
    prev: Option<&CoefficientStack>,
    coeffs: &CoefficientStack,
    k: usize,
    order: &[usize],
) -> Result<(LayerGram, DMatrix<f64>)> {
    let per_sample = (0..data.len())
        .into_par_iter()
        .map(|m| -> Result<(Vec<DMatrix<f64>>, DMatrix<f64>)> {
            let z = &coeffs.blocks[m];
            let mut cross = DMatrix::zeros(k, k);
            match prev {
                None => {
                    let x = materialize_toeplitz(&data[m].values, k)?;
                    cross.copy_from(&(x.transpose() * &z.0));
                    Ok((vec![x.transpose() * &x], cross))
                }
                Some(stack) => {
                    let mut grams = Vec::with_capacity(k);
                    for c in 0..k {
                        let d = materialize_toeplitz(stack.blocks[m].channel(c), k)?;
                        let col = d.transpose() * nalgebra::DVector::from_column_slice(z.channel(c));
                        cross.set_column(c, &col);
                        grams.push(d.transpose() * d);
                    }
                    Ok((grams, cross))
                }
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let channels = if prev.is_none() { 1 } else { k };
    let mut grams = vec![DMatrix::zeros(k, k); channels];
    let mut cross = DMatrix::zeros(k, k);
    for &m in order {
        let (g, c) = &per_sample[m];
        for (acc, gi) in grams.iter_mut().zip(g) {
            *acc += gi;
        }
        cross += c;
    }
    let gram = if prev.is_none() {
        LayerGram::Shared(grams.pop().expect("one gram"))
    } else {
        LayerGram::PerChannel(grams)
    };
    Ok((gram, cross))
}

/// Value of the transform subproblem with channel-specific Gram matrices.
fn per_channel_objective(
    grams: &[DMatrix<f64>],
    cross: &DMatrix<f64>,
    anchor: &DMatrix<f64>,
    t: &DMatrix<f64>,
    config: &ModelConfig,
) -> f64 {
    let ld = log_det_sv(t);
    if ld == f64::NEG_INFINITY {
        return f64::INFINITY;
    }
    let mut v = 0.0;
    for (c, g) in grams.iter().enumerate() {
        let tc = t.column(c);
        v += 0.5 * tc.dot(&(g * tc)) - cross.column(c).dot(&tc);
    }
    v + config.mu * t.norm_squared() - config.lambda * ld + 0.5 / config.gamma1 * (t - anchor).norm_squared()
}

/// Proximal transform update of one layer.
///
/// With a shared Gram the closed form is exact. Otherwise the quadratic is
/// majorized by one with the common curvature `G_avg + delta I`, where
/// `delta` is the largest eigenvalue of any `G_k - G_avg`; each majorizer is
/// minimized in closed form, so the subproblem value never increases.
fn transform_step(gram: &LayerGram, cross: &DMatrix<f64>, anchor: &KernelBank, config: &ModelConfig) -> Result<KernelBank> {
    let anchor = anchor.matrix();
    match gram {
        LayerGram::Shared(g) => {
            let inputs = TransformUpdateInputs {
                gram: g.clone(),
                cross: cross.clone(),
                anchor: anchor.clone(),
                mu: config.mu,
                lambda: config.lambda,
                gamma1: config.gamma1,
            };
            let t = crate::prox::update_transform(&inputs)?;
            if inputs.objective(&t) <= inputs.objective(anchor) {
                Ok(KernelBank(t))
            } else {
                Ok(KernelBank(anchor.clone()))
            }
        }
        LayerGram::PerChannel(grams) => {
            let k = anchor.nrows();
            let mean = grams.iter().fold(DMatrix::zeros(k, k), |acc, g| acc + g) / grams.len() as f64;
            let delta = grams
                .iter()
                .map(|g| SymmetricEigen::new(g - &mean).eigenvalues.max())
                .fold(0.0f64, f64::max);
            let majorant = &mean + DMatrix::identity(k, k) * delta;

            let mut current = anchor.clone();
            let mut value = per_channel_objective(grams, cross, anchor, &current, config);
            for _ in 0..TRANSFORM_MM_ITERS {
                let mut shifted = cross.clone();
                for (c, g) in grams.iter().enumerate() {
                    let corr = (&majorant - g) * current.column(c);
                    let mut col = shifted.column_mut(c);
                    col += corr;
                }
                let inputs = TransformUpdateInputs {
                    gram: majorant.clone(),
                    cross: shifted,
                    anchor: anchor.clone(),
                    mu: config.mu,
                    lambda: config.lambda,
                    gamma1: config.gamma1,
                };
                let next = crate::prox::update_transform(&inputs)?;
                let next_value = per_channel_objective(grams, cross, anchor, &next, config);
                if next_value.is_nan() || next_value > value {
                    break;
                }
                let step = (&next - &current).norm();
                let scale = current.norm().max(1.0);
                current = next;
                value = next_value;
                if step <= TRANSFORM_MM_TOL * scale {
                    break;
                }
            }
            Ok(KernelBank(current))
        }
    }
}

fn wrap(iteration: usize, layer: usize, step: &'static str) -> impl FnOnce(Error) -> Error {
    move |e| Error::Training {
        iteration,
        layer,
        step,
        source: Box::new(e),
    }
}

/// Mutable training state: the current iterate of every layer.
struct State {
    transforms: Vec<KernelBank>,
    coeffs: Vec<CoefficientStack>,
}

/// One outer iteration: for every layer in ascending order, update the
/// transform, then the coefficients. Calls `record` after each layer.
fn sweep(
    state: &mut State,
    data: &[Sample],
    config: &ModelConfig,
    order: &[usize],
    iteration: usize,
    mut record: impl FnMut(usize, &State) -> Result<()>,
) -> Result<()> {
    let layers = config.num_layers;
    let k = config.num_kernels;
    for l in 0..layers {
        let (done, rest) = state.coeffs.split_at_mut(l);
        let prev = done.last();
        let current = &mut rest[0];

        let (gram, cross) =
            transform_statistics(data, prev, current, k, order).map_err(wrap(iteration, l + 1, "transform statistics"))?;
        let bank = transform_step(&gram, &cross, &state.transforms[l], config)
            .map_err(wrap(iteration, l + 1, "transform update"))?;
        state.transforms[l] = bank;

        let forward =
            forward_layer(data, prev, &state.transforms[l]).map_err(wrap(iteration, l + 1, "forward product"))?;
        let anchor = current.clone();
        let updated = if l + 1 < layers {
            let (_, after) = rest.split_at(1);
            let problem = CoefficientProblem {
                forward: &forward,
                anchor: &anchor,
                coupling: Some(Coupling {
                    next_transform: &state.transforms[l + 1],
                    next_coeffs: &after[0],
                }),
                beta: config.beta,
                gamma2: config.gamma2,
            };
            let (z, report) = projected_newton_coeffs(&anchor, &problem, &config.newton)
                .map_err(wrap(iteration, l + 1, "projected Newton coefficient update"))?;
            if !report.converged() {
                log::warn!(
                    "iteration {iteration}, layer {}: {} of {} Newton blocks did not converge",
                    l + 1,
                    report.unconverged,
                    report.blocks
                );
            }
            z
        } else {
            let problem = CoefficientProblem {
                forward: &forward,
                anchor: &anchor,
                coupling: None,
                beta: config.beta,
                gamma2: config.gamma2,
            };
            separable_coeff_update(&problem).map_err(wrap(iteration, l + 1, "separable coefficient update"))?
        };
        state.coeffs[l] = updated;
        record(l + 1, state)?;
    }
    Ok(())
}

/// Trains the layered model by alternating proximal minimization.
///
/// Each outer iteration sweeps the layers in ascending order, updating
/// `T_l` (closed-form log-det prox) and then `Z_l` (projected Newton for
/// inner layers, one-sided soft thresholding for the last). The objective is
/// recorded after every layer; iteration stops after `max_outer_iters` or
/// once the relative decrease over a full sweep drops below `objective_tol`.
pub fn train(data: &[Sample], config: &ModelConfig) -> Result<TrainedModel> {
    let (model, _) = train_with_coefficients(data, config)?;
    Ok(model)
}

/// Like [`train`], also returning the final training coefficients of every layer.
pub fn train_with_coefficients(data: &[Sample], config: &ModelConfig) -> Result<(TrainedModel, Vec<CoefficientStack>)> {
    config.validate()?;
    let n = check_data(data, config.num_kernels)?;
    let order = reduction_order(data);
    let (transforms, coeffs) = init_model(config, data)?;
    let mut state = State { transforms, coeffs };

    let eval = |state: &State| objective(&state.transforms, &state.coeffs, data, config);
    let mut trace = vec![TraceEntry {
        iter: 0,
        layer: 0,
        objective: eval(&state)?,
    }];

    for iteration in 1..=config.max_outer_iters {
        let before = trace.last().expect("initial entry").objective;
        sweep(&mut state, data, config, &order, iteration, |layer, s| {
            let value = eval(s).map_err(wrap(iteration, layer, "objective"))?;
            trace.push(TraceEntry {
                iter: iteration,
                layer,
                objective: value,
            });
            Ok(())
        })?;
        let after = trace.last().expect("entry").objective;
        log::debug!("iteration {iteration}: objective {after:.10e}");
        if !after.is_finite() {
            return Err(Error::Training {
                iteration,
                layer: config.num_layers,
                step: "objective",
                source: Box::new(Error::Numerical(format!("objective became {after}"))),
            });
        }
        let relative = (before - after) / before.abs().max(f64::MIN_POSITIVE);
        if relative < config.objective_tol {
            break;
        }
    }

    let model = TrainedModel {
        transforms: state.transforms,
        config: config.clone(),
        training_trace: trace,
        data_dims: (data.len(), n),
    };
    Ok((model, state.coeffs))
}

/// Per-layer coefficients of new data: `Z_l = max(Z_{l-1} T_l - beta, 0)`,
/// starting from the raw signals.
pub fn encode_layers(model: &TrainedModel, data: &[Sample]) -> Result<Vec<CoefficientStack>> {
    let k = model.config.num_kernels;
    let n = check_data(data, k)?;
    if n != model.signal_len() {
        return Err(invalid(format!(
            "samples have length {n}, model was trained on length {}",
            model.signal_len()
        )));
    }
    let beta = model.config.beta;
    let mut layers: Vec<CoefficientStack> = Vec::with_capacity(model.num_layers());
    for bank in &model.transforms {
        let mut z = forward_layer(data, layers.last(), bank)?;
        for b in &mut z.blocks {
            b.0.apply(|v| *v = (*v - beta).max(0.0));
        }
        layers.push(z);
    }
    Ok(layers)
}

/// Feature vectors (one per sample): the final layer's coefficients,
/// flattened channel by channel (length `N * K`).
pub fn encode(model: &TrainedModel, data: &[Sample]) -> Result<Vec<Vec<f64>>> {
    let layers = encode_layers(model, data)?;
    let last = layers.last().expect("at least one layer");
    Ok((0..last.len()).map(|m| last.flatten_sample(m)).collect())
}

/// Sum-pools every channel over consecutive windows of `pool` positions
/// (the last window may be shorter), then flattens channel by channel.
/// `pool == 1` is plain flattening.
pub fn pooled_features(stack: &CoefficientStack, pool: usize) -> Result<Vec<Vec<f64>>> {
    if pool == 0 {
        return Err(invalid("pool size must be positive"));
    }
    Ok(stack
        .blocks
        .iter()
        .map(|b| {
            (0..b.channels())
                .flat_map(|c| b.channel(c).chunks(pool).map(|w| w.iter().sum::<f64>()))
                .collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Uniform};

    fn random_samples(seed: u64, m: usize, n: usize) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = Uniform::new(0.0, 1.0).unwrap();
        (0..m).map(|i| Sample::new(i, (0..n).map(|_| u.sample(&mut rng)).collect()).unwrap()).collect()
    }

    fn small_config(layers: usize, k: usize) -> ModelConfig {
        ModelConfig {
            num_layers: layers,
            num_kernels: k,
            max_outer_iters: 10,
            objective_tol: 0.0,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn objective_of_perfect_fit_is_zero() {
        let data = random_samples(1, 2, 6);
        let config = ModelConfig {
            num_layers: 1,
            num_kernels: 2,
            mu: 0.0,
            lambda: 1.0,
            beta: 0.0,
            ..Default::default()
        };
        let t = KernelBank::identity(2);
        let z = forward_layer(&data, None, &t).unwrap();
        // lambda only multiplies log det I = 0
        assert_eq!(objective(&[t], &[z], &data, &config).unwrap(), 0.0);
    }

    #[test]
    fn negative_coefficient_gives_infinite_objective() {
        let data = random_samples(2, 2, 6);
        let config = small_config(1, 2);
        let t = KernelBank::identity(2);
        let mut z = forward_layer(&data, None, &t).unwrap();
        z.blocks[1].0[(3, 1)] = -1e-9;
        assert_eq!(objective(&[t], &[z], &data, &config).unwrap(), f64::INFINITY);
    }

    #[test]
    fn singular_transform_gives_infinite_objective() {
        let data = random_samples(2, 2, 6);
        let config = small_config(1, 2);
        let t = KernelBank(DMatrix::zeros(2, 2));
        let z = CoefficientStack::zeros(2, 6, 2);
        assert_eq!(objective(&[t], &[z], &data, &config).unwrap(), f64::INFINITY);
    }

    #[test]
    fn objective_rejects_mismatched_dims() {
        let data = random_samples(2, 2, 6);
        let config = small_config(2, 2);
        let t = KernelBank::identity(2);
        let z = CoefficientStack::zeros(2, 6, 2);
        assert!(objective(std::slice::from_ref(&t), std::slice::from_ref(&z), &data, &config).is_err());
        let bad = CoefficientStack::zeros(2, 5, 2);
        assert!(objective(&[t.clone(), t], &[z, bad], &data, &config).is_err());
    }

    #[test]
    fn init_is_deterministic_and_well_conditioned() {
        let config = ModelConfig::default();
        assert_eq!(init_transforms(&config).unwrap(), init_transforms(&config).unwrap());
        for seed in 0..100 {
            let banks = init_transforms(&ModelConfig { seed, ..config.clone() }).unwrap();
            for b in banks {
                assert!(b.matrix().singular_values().min() >= 0.01);
            }
        }
        let exact = init_transforms(&ModelConfig { init_scale: 0.0, ..config }).unwrap();
        assert!(exact.iter().all(|b| *b == KernelBank::identity(8)));
    }

    #[test]
    fn init_coefficients_are_feasible() {
        let data = random_samples(4, 3, 12);
        let config = small_config(3, 4);
        let (t, z) = init_model(&config, &data).unwrap();
        assert!(z.iter().all(|s| s.min_entry() >= 0.0));
        assert!(objective(&t, &z, &data, &config).unwrap().is_finite());
    }

    #[test]
    fn training_descends_and_keeps_invariants() {
        let data = random_samples(5, 4, 16);
        let config = small_config(3, 4);
        let (model, coeffs) = train_with_coefficients(&data, &config).unwrap();
        for w in model.training_trace.windows(2) {
            assert!(w[1].objective <= w[0].objective + 1e-9, "{:?}", w);
        }
        assert_eq!(model.training_trace.len(), 1 + 10 * 3);
        assert!(coeffs.iter().all(|z| z.min_entry() >= 0.0));
        for t in &model.transforms {
            assert!(t.matrix().singular_values().min() > 0.0);
        }
        let final_value = objective(&model.transforms, &coeffs, &data, &config).unwrap();
        assert_eq!(final_value, model.final_objective().unwrap());
    }

    #[test]
    fn zero_signal_keeps_zero_coefficients() {
        let data = vec![Sample::new(0, vec![0.0; 12]).unwrap()];
        let config = ModelConfig {
            num_layers: 2,
            num_kernels: 3,
            max_outer_iters: 5,
            ..Default::default()
        };
        let (model, coeffs) = train_with_coefficients(&data, &config).unwrap();
        assert!(coeffs.iter().all(|z| z.iter().all(|&v| v == 0.0)));
        for w in model.training_trace.windows(2) {
            assert!(w[1].objective <= w[0].objective + 1e-9);
        }
    }

    #[test]
    fn training_rejects_bad_inputs() {
        let config = small_config(1, 4);
        assert!(train(&[], &config).is_err());
        let short = random_samples(1, 2, 3);
        assert!(train(&short, &config).is_err());
        let mut ragged = random_samples(1, 2, 8);
        ragged[1].values.pop();
        assert!(train(&ragged, &config).is_err());
        let bad = ModelConfig { lambda: 0.0, ..config };
        assert!(train(&random_samples(1, 2, 8), &bad).is_err());
    }

    #[test]
    fn encode_with_unit_impulses_is_rectified_identity() {
        let mut data = random_samples(7, 2, 10);
        data[0].values[3] = -0.5;
        let model = TrainedModel {
            transforms: vec![KernelBank::unit_impulses(3), KernelBank::unit_impulses(3)],
            config: ModelConfig {
                num_layers: 2,
                num_kernels: 3,
                beta: 0.0,
                ..Default::default()
            },
            training_trace: vec![],
            data_dims: (2, 10),
        };
        let feats = encode(&model, &data).unwrap();
        for (f, s) in feats.iter().zip(&data) {
            for c in 0..3 {
                for (i, v) in s.values.iter().enumerate() {
                    assert_eq!(f[c * 10 + i], v.max(0.0));
                }
            }
        }
    }

    #[test]
    fn encode_with_huge_threshold_is_zero() {
        let data = random_samples(8, 3, 10);
        let config = small_config(2, 3);
        let mut model = train(&data, &ModelConfig { max_outer_iters: 2, ..config }).unwrap();
        model.config.beta = 1e9;
        assert!(encode(&model, &data).unwrap().iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_rejects_wrong_length() {
        let data = random_samples(8, 3, 10);
        let model = train(&data, &ModelConfig { max_outer_iters: 1, ..small_config(1, 3) }).unwrap();
        assert!(encode(&model, &random_samples(1, 1, 11)).is_err());
    }

    #[test]
    fn pooling_sums_windows() {
        let mut block = ChannelBlock::zeros(5, 2);
        block.channel_mut(0).copy_from_slice(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        block.channel_mut(1).copy_from_slice(&[1.0, 1.0, 1.0, 1.0, 1.0]);
        let stack = CoefficientStack { blocks: vec![block] };
        assert_eq!(pooled_features(&stack, 2).unwrap(), vec![vec![3.0, 7.0, 5.0, 2.0, 2.0, 1.0]]);
        assert_eq!(pooled_features(&stack, 1).unwrap()[0], stack.flatten_sample(0));
        assert!(pooled_features(&stack, 0).is_err());
    }
}
