//! Signals, "same"-length convolution and its Toeplitz realization.
//!
//! Convention used everywhere in this crate: true convolution (the kernel
//! is index-reversed) with zero padding, output length equal to the signal
//! length, and the kernel centred at `offset = (K - 1) / 2`:
//!
//! ```text
//! out[n] = sum_j kernel[j] * signal[n + offset - j]
//! ```
//!
//! where out-of-range signal indices read as zero. This matches the `same`
//! mode of `numpy.convolve` for both odd and even `K`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Offset of the kernel centre for a kernel of length `k`.
#[inline]
pub fn center_offset(k: usize) -> usize {
    k.saturating_sub(1) / 2
}

/// One input signal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: usize,
    pub values: Vec<f64>,
}

impl Sample {
    pub fn new(id: usize, values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("sample {id}: non-finite value at index {i}")));
        }
        Ok(Self { id, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// One sample's coefficients for one layer: an `N x K` matrix, one column
/// per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelBlock(pub DMatrix<f64>);

impl ChannelBlock {
    pub fn zeros(n: usize, k: usize) -> Self {
        Self(DMatrix::zeros(n, k))
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }

    pub fn channels(&self) -> usize {
        self.0.ncols()
    }

    pub fn channel(&self, k: usize) -> &[f64] {
        let n = self.0.nrows();
        &self.0.as_slice()[k * n..(k + 1) * n]
    }

    pub fn channel_mut(&mut self, k: usize) -> &mut [f64] {
        let n = self.0.nrows();
        &mut self.0.as_mut_slice()[k * n..(k + 1) * n]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }
}

/// Coefficients of one layer for all `M` samples, each an `N x K` block.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientStack {
    pub blocks: Vec<ChannelBlock>,
}

impl CoefficientStack {
    pub fn new(blocks: Vec<ChannelBlock>) -> Result<Self> {
        if let Some(first) = blocks.first() {
            let (n, k) = first.0.shape();
            if blocks.iter().any(|b| b.0.shape() != (n, k)) {
                return Err(invalid("coefficient blocks have inconsistent shapes"));
            }
        }
        Ok(Self { blocks })
    }

    pub fn zeros(m: usize, n: usize, k: usize) -> Self {
        Self {
            blocks: (0..m).map(|_| ChannelBlock::zeros(n, k)).collect(),
        }
    }

    /// `(M, N, K)`; `N` and `K` are zero for an empty stack.
    pub fn dims(&self) -> (usize, usize, usize) {
        match self.blocks.first() {
            Some(b) => (self.blocks.len(), b.len(), b.channels()),
            None => (0, 0, 0),
        }
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.blocks.iter().flat_map(|b| b.0.iter())
    }

    pub fn min_entry(&self) -> f64 {
        self.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Sample `m`'s coefficients flattened column by column (channel-major).
    pub fn flatten_sample(&self, m: usize) -> Vec<f64> {
        self.blocks[m].0.as_slice().to_vec()
    }
}

/// A layer transform: a `K x K` matrix whose columns are the `K` kernels.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelBank(pub DMatrix<f64>);

impl KernelBank {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() {
            return Err(invalid(format!(
                "kernel bank must be square, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(invalid("kernel bank has non-finite entries"));
        }
        Ok(Self(matrix))
    }

    pub fn identity(k: usize) -> Self {
        Self(DMatrix::identity(k, k))
    }

    /// Every column is the unit impulse at the kernel centre, so every
    /// channel is passed through unchanged by [`conv_same`].
    pub fn unit_impulses(k: usize) -> Self {
        let mut m = DMatrix::zeros(k, k);
        let c = center_offset(k);
        for j in 0..k {
            m[(c, j)] = 1.0;
        }
        Self(m)
    }

    pub fn size(&self) -> usize {
        self.0.nrows()
    }

    pub fn kernel(&self, k: usize) -> &[f64] {
        let n = self.0.nrows();
        &self.0.as_slice()[k * n..(k + 1) * n]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }
}

fn check_lengths(n: usize, k: usize) -> Result<()> {
    if k == 0 {
        return Err(invalid("kernel length must be positive"));
    }
    if k > n {
        return Err(invalid(format!("kernel length {k} exceeds signal length {n}")));
    }
    Ok(())
}

/// Unchecked "same" convolution written into `out`.
pub(crate) fn conv_same_into(signal: &[f64], kernel: &[f64], out: &mut [f64]) {
    let n = signal.len();
    let off = center_offset(kernel.len()) as isize;
    for (i, o) in out.iter_mut().enumerate() {
        let base = i as isize + off;
        let mut acc = 0.0;
        for (j, &w) in kernel.iter().enumerate() {
            let p = base - j as isize;
            if p >= 0 && (p as usize) < n {
                acc += w * signal[p as usize];
            }
        }
        *o = acc;
    }
}

/// Adjoint of `signal -> conv_same(signal, kernel)` applied to `y`.
pub(crate) fn conv_same_adjoint_into(y: &[f64], kernel: &[f64], out: &mut [f64]) {
    let n = y.len();
    let off = center_offset(kernel.len()) as isize;
    for (p, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (j, &w) in kernel.iter().enumerate() {
            let i = p as isize - off + j as isize;
            if i >= 0 && (i as usize) < n {
                acc += w * y[i as usize];
            }
        }
        *o = acc;
    }
}

/// Zero-padded "same" convolution of `signal` (length N) with `kernel`
/// (length K <= N).
pub fn conv_same(signal: &[f64], kernel: &[f64]) -> Result<Vec<f64>> {
    check_lengths(signal.len(), kernel.len())?;
    let mut out = vec![0.0; signal.len()];
    conv_same_into(signal, kernel, &mut out);
    Ok(out)
}

/// Adjoint of the linear map `signal -> conv_same(signal, kernel)`, i.e. a
/// "same" correlation with the same centring.
pub fn conv_same_adjoint(y: &[f64], kernel: &[f64]) -> Result<Vec<f64>> {
    check_lengths(y.len(), kernel.len())?;
    let mut out = vec![0.0; y.len()];
    conv_same_adjoint_into(y, kernel, &mut out);
    Ok(out)
}

/// The `N x K` Toeplitz matrix `X` of `signal`, so that `X * t ==
/// conv_same(signal, t)` for every kernel `t` of length `K`.
pub fn materialize_toeplitz(signal: &[f64], kernel_size: usize) -> Result<DMatrix<f64>> {
    let n = signal.len();
    check_lengths(n, kernel_size)?;
    let off = center_offset(kernel_size) as isize;
    Ok(DMatrix::from_fn(n, kernel_size, |i, j| {
        let p = i as isize + off - j as isize;
        if p >= 0 && (p as usize) < n {
            signal[p as usize]
        } else {
            0.0
        }
    }))
}

/// The `N x N` matrix of the map `z -> conv_same(z, kernel)`.
pub fn convolution_matrix(kernel: &[f64], n: usize) -> Result<DMatrix<f64>> {
    check_lengths(n, kernel.len())?;
    let off = center_offset(kernel.len()) as isize;
    let k = kernel.len() as isize;
    Ok(DMatrix::from_fn(n, n, |i, p| {
        let j = i as isize + off - p as isize;
        if (0..k).contains(&j) {
            kernel[j as usize]
        } else {
            0.0
        }
    }))
}

/// Channel-wise convolution: output column `k` is `conv_same(block[:, k],
/// bank[:, k])`. Channels never mix.
pub fn multichannel_forward(block: &ChannelBlock, bank: &KernelBank) -> Result<ChannelBlock> {
    let k = bank.size();
    if block.channels() != k {
        return Err(invalid(format!(
            "block has {} channels but bank has {k} kernels",
            block.channels()
        )));
    }
    check_lengths(block.len(), k)?;
    let mut out = ChannelBlock::zeros(block.len(), k);
    for c in 0..k {
        conv_same_into(block.channel(c), bank.kernel(c), out.channel_mut(c));
    }
    Ok(out)
}

/// Input to one layer's forward product.
#[derive(Clone, Copy, Debug)]
pub enum LayerInput<'a> {
    /// First layer: the raw signal, seen through its Toeplitz view `X T`.
    Signal(&'a [f64]),
    /// Deeper layers: the previous layer's coefficients, convolved channel-wise.
    Channels(&'a ChannelBlock),
}

impl LayerInput<'_> {
    pub fn len(&self) -> usize {
        match self {
            LayerInput::Signal(s) => s.len(),
            LayerInput::Channels(b) => b.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Signal (or channel) that kernel `k` is convolved with.
    pub fn source(&self, k: usize) -> &[f64] {
        match self {
            LayerInput::Signal(s) => s,
            LayerInput::Channels(b) => b.channel(k),
        }
    }
}

/// Forward product of one layer, `Z_{m,l-1} T_l`.
pub fn layer_forward(input: LayerInput<'_>, bank: &KernelBank) -> Result<ChannelBlock> {
    match input {
        LayerInput::Signal(signal) => {
            let k = bank.size();
            check_lengths(signal.len(), k)?;
            let mut out = ChannelBlock::zeros(signal.len(), k);
            for c in 0..k {
                conv_same_into(signal, bank.kernel(c), out.channel_mut(c));
            }
            Ok(out)
        }
        LayerInput::Channels(block) => multichannel_forward(block, bank),
    }
}
