//! Small fully-connected networks with hand-written backpropagation, the
//! skinning-weight offset field and the pose refinement head.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kinematics::Pose;
use crate::rotation::{axis_angle_backward, axis_angle_to_matrix, matrix_to_axis_angle};

/// Hidden width of both deformation networks.
pub const HIDDEN_WIDTH: usize = 128;
/// Positional-encoding frequency count; 3 + 6·10 = 63 inputs.
pub const LBS_FREQUENCIES: usize = 10;
pub const LBS_WEIGHT_EPS: f64 = 1e-8;

/// `[p, sin(2⁰πp), cos(2⁰πp), …, sin(2^{L-1}πp), cos(2^{L-1}πp)]`, each
/// block holding the three components.
pub fn encode_position(p: &Vector3<f64>, frequencies: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(3 + 6 * frequencies);
    encode_position_into(p, frequencies, &mut out);
    out
}

fn encode_position_into(p: &Vector3<f64>, frequencies: usize, out: &mut Vec<f64>) {
    out.extend_from_slice(p.as_slice());
    let mut freq = std::f64::consts::PI;
    for _ in 0..frequencies {
        let (s, c): (Vec<f64>, Vec<f64>) = p.iter().map(|&x| (freq * x).sin_cos()).unzip();
        out.extend_from_slice(&s);
        out.extend_from_slice(&c);
        freq *= 2.0;
    }
}

/// Gradient with respect to `p` given a gradient on the encoding.
pub fn encode_position_backward(p: &Vector3<f64>, frequencies: usize, d_enc: &[f64]) -> Vector3<f64> {
    let mut d = Vector3::from_column_slice(&d_enc[..3]);
    let mut freq = std::f64::consts::PI;
    for i in 0..frequencies {
        let base = 3 + 6 * i;
        for c in 0..3 {
            let (s, co) = (freq * p[c]).sin_cos();
            d[c] += freq * (co * d_enc[base + c] - s * d_enc[base + 3 + c]);
        }
        freq *= 2.0;
    }
    d
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// out × in
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

/// Fully-connected network: ReLU after every hidden layer, linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

/// Layer inputs saved by the forward pass; `inputs[l]` is the (in × batch)
/// input of layer l, i.e. the ReLU output of layer l−1.
#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<Linear>,
}

impl MlpGrads {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| Linear {
                    weight: DMatrix::zeros(l.weight.nrows(), l.weight.ncols()),
                    bias: DVector::zeros(l.bias.len()),
                })
                .collect(),
        }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

impl Mlp {
    /// `widths = [in, hidden…, out]`. Weights and biases are drawn from
    /// U(−1/√fan_in, 1/√fan_in); the output layer is zeroed when
    /// `zero_output` is set.
    pub fn new(widths: &[usize], seed: u64, zero_output: bool) -> Self {
        assert!(widths.len() >= 2, "an mlp needs at least input and output widths");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let (fan_in, fan_out) = (widths[l], widths[l + 1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                if zero_output && l == n - 1 {
                    Linear {
                        weight: DMatrix::zeros(fan_out, fan_in),
                        bias: DVector::zeros(fan_out),
                    }
                } else {
                    Linear {
                        weight: DMatrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-bound..bound)),
                        bias: DVector::from_fn(fan_out, |_, _| rng.random_range(-bound..bound)),
                    }
                }
            })
            .collect();
        Self { layers }
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.nrows()
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_width()];
        w.extend(self.layers.iter().map(|l| l.weight.nrows()));
        w
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Parameter slices in a fixed order: w0, b0, w1, b1, …
    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// Batched forward pass; `x` is (in × batch).
    pub fn forward_batch(&self, x: DMatrix<f64>) -> Result<(DMatrix<f64>, MlpCache)> {
        if x.nrows() != self.input_width() {
            return Err(Error::Shape(format!(
                "mlp input has {} rows, expected {}",
                x.nrows(),
                self.input_width()
            )));
        }
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut h = x;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = &layer.weight * &h;
            for mut col in z.column_iter_mut() {
                col += &layer.bias;
            }
            inputs.push(h);
            if l + 1 < n {
                z.apply(|v| *v = v.max(0.0));
            }
            h = z;
        }
        Ok((h, MlpCache { inputs }))
    }

    /// Reverse pass for a batch. Returns parameter gradients (summed over
    /// the batch) and the gradient on the input.
    pub fn backward_batch(&self, cache: &MlpCache, d_out: DMatrix<f64>) -> (MlpGrads, DMatrix<f64>) {
        let n = self.layers.len();
        let mut grads = Vec::with_capacity(n);
        let mut dz = d_out;
        for l in (0..n).rev() {
            let x = &cache.inputs[l];
            let layer = &self.layers[l];
            let d_weight = &dz * x.transpose();
            let d_bias = dz.column_sum();
            let mut dx = layer.weight.transpose() * &dz;
            if l > 0 {
                dx.zip_apply(x, |d, xv| {
                    if xv <= 0.0 {
                        *d = 0.0
                    }
                });
            }
            grads.push(Linear {
                weight: d_weight,
                bias: d_bias,
            });
            dz = dx;
        }
        grads.reverse();
        (MlpGrads { layers: grads }, dz)
    }
}

/// Single-sample forward pass.
pub fn mlp_forward(net: &Mlp, x: &[f64]) -> Result<(Vec<f64>, MlpCache)> {
    let (y, cache) = net.forward_batch(DMatrix::from_column_slice(x.len(), 1, x))?;
    Ok((y.as_slice().to_vec(), cache))
}

/// Single-sample reverse pass: (dL/dparams, dL/dx).
pub fn mlp_backward(net: &Mlp, cache: &MlpCache, d_y: &[f64]) -> (MlpGrads, Vec<f64>) {
    let (g, dx) = net.backward_batch(cache, DMatrix::from_column_slice(d_y.len(), 1, d_y));
    (g, dx.as_slice().to_vec())
}

/// w = softmax(log(base + 1e-8) + offsets).
pub fn compute_lbs_weights(base: &[f64], offsets: &[f64]) -> Vec<f64> {
    let logits: Vec<f64> = base
        .iter()
        .zip(offsets)
        .map(|(b, o)| (b + LBS_WEIGHT_EPS).ln() + o)
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.iter().map(|e| e / sum).collect()
}

/// Gradient on the offsets given the softmax output and dL/dw.
pub fn compute_lbs_weights_backward(weights: &[f64], d_weights: &[f64]) -> Vec<f64> {
    let dot: f64 = weights.iter().zip(d_weights).map(|(w, d)| w * d).sum();
    weights.iter().zip(d_weights).map(|(w, d)| w * (d - dot)).collect()
}

/// Predicts skinning-weight logit offsets from an encoded canonical
/// position: 63 → 128 → 128 → 128 → K.
#[derive(Debug, Clone, PartialEq)]
pub struct LbsOffsetNet {
    pub mlp: Mlp,
}

impl LbsOffsetNet {
    pub fn new(joint_count: usize, seed: u64) -> Self {
        let input = 3 + 6 * LBS_FREQUENCIES;
        Self {
            mlp: Mlp::new(
                &[input, HIDDEN_WIDTH, HIDDEN_WIDTH, HIDDEN_WIDTH, joint_count],
                seed,
                true,
            ),
        }
    }

    /// Offsets for a batch of canonical positions; returns (K × n) offsets
    /// and the cache for [`LbsOffsetNet::backward`].
    pub fn forward(&self, positions: &[Vector3<f64>]) -> Result<(DMatrix<f64>, MlpCache)> {
        let width = 3 + 6 * LBS_FREQUENCIES;
        let mut data = Vec::with_capacity(width * positions.len());
        for p in positions {
            encode_position_into(p, LBS_FREQUENCIES, &mut data);
        }
        self.mlp.forward_batch(DMatrix::from_vec(width, positions.len(), data))
    }

    /// Returns parameter gradients and per-position gradients through the
    /// encoding.
    pub fn backward(
        &self,
        positions: &[Vector3<f64>],
        cache: &MlpCache,
        d_offsets: DMatrix<f64>,
    ) -> (MlpGrads, Vec<Vector3<f64>>) {
        let (grads, d_enc) = self.mlp.backward_batch(cache, d_offsets);
        let d_pos = positions
            .iter()
            .enumerate()
            .map(|(i, p)| encode_position_backward(p, LBS_FREQUENCIES, d_enc.column(i).as_slice()))
            .collect();
        (grads, d_pos)
    }
}

/// Learns per-joint rotation corrections from the flattened non-root joint
/// rotations: 3(K−1) → 128 → 128 → 3(K−1).
#[derive(Debug, Clone, PartialEq)]
pub struct PoseRefineNet {
    pub mlp: Mlp,
    pub joint_count: usize,
    pub root: usize,
}

/// Forward state of one pose refinement, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct PoseRefinement {
    pub refined: Pose,
    /// Local rotation matrices R(correction_j)·R(θ_j) fed to kinematics.
    pub local_rotations: Vec<Matrix3<f64>>,
    corrections: Vec<Vector3<f64>>,
    cache: MlpCache,
}

impl PoseRefineNet {
    pub fn new(joint_count: usize, root: usize, seed: u64) -> Self {
        let dim = 3 * (joint_count - 1);
        Self {
            mlp: Mlp::new(&[dim, HIDDEN_WIDTH, HIDDEN_WIDTH, dim], seed, true),
            joint_count,
            root,
        }
    }

    fn non_root(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.joint_count).filter(move |&j| j != self.root)
    }

    pub fn flatten(&self, pose: &Pose) -> Vec<f64> {
        self.non_root()
            .flat_map(|j| pose.joint_rotations[j].iter().copied().collect::<Vec<_>>())
            .collect()
    }

    pub fn forward(&self, pose: &Pose) -> Result<PoseRefinement> {
        if pose.joint_rotations.len() != self.joint_count {
            return Err(Error::Shape(format!(
                "pose has {} joints, refinement net expects {}",
                pose.joint_rotations.len(),
                self.joint_count
            )));
        }
        let (out, cache) = mlp_forward(&self.mlp, &self.flatten(pose))?;
        let mut corrections = vec![Vector3::zeros(); self.joint_count];
        for (slot, j) in self.non_root().enumerate() {
            corrections[j] = Vector3::from_column_slice(&out[3 * slot..3 * slot + 3]);
        }
        let mut refined = pose.clone();
        let mut local_rotations = Vec::with_capacity(self.joint_count);
        for j in 0..self.joint_count {
            let base = axis_angle_to_matrix(&pose.joint_rotations[j]);
            if j == self.root || corrections[j] == Vector3::zeros() {
                local_rotations.push(base);
            } else {
                let m = axis_angle_to_matrix(&corrections[j]) * base;
                refined.joint_rotations[j] = matrix_to_axis_angle(&m);
                local_rotations.push(axis_angle_to_matrix(&refined.joint_rotations[j]));
            }
        }
        Ok(PoseRefinement {
            refined,
            local_rotations,
            corrections,
            cache,
        })
    }

    /// Gradients on the network parameters from gradients on the local
    /// rotation matrices used by forward kinematics.
    pub fn backward(&self, pose: &Pose, state: &PoseRefinement, d_local: &[Matrix3<f64>]) -> MlpGrads {
        let mut d_out = Vec::with_capacity(3 * (self.joint_count - 1));
        for j in self.non_root() {
            let base = axis_angle_to_matrix(&pose.joint_rotations[j]);
            let d_corr_mat = d_local[j] * base.transpose();
            let d = axis_angle_backward(&state.corrections[j], &d_corr_mat);
            d_out.extend_from_slice(d.as_slice());
        }
        mlp_backward(&self.mlp, &state.cache, &d_out).0
    }
}

/// θ′_j = log(R(correction_j)·R(θ_j)) for non-root joints; the root
/// rotation and translation pass through.
pub fn refine_pose(theta: &Pose, net: &PoseRefineNet) -> Result<Pose> {
    Ok(net.forward(theta)?.refined)
}
