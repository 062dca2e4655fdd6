//! The Siamese embedding network and the training-time classifier head.
//!
//! The reference stack is three blocks of
//! [conv3d 3x3x3 same, stride 1 -> batchnorm -> relu -> maxpool3d],
//! channels 16 -> 32 -> 64, followed by global average pooling, a dense
//! projection to the embedding width, and L2 normalization. The first
//! block pools the long frame axis by 4, later blocks by 2.
//!
//! One parameter set exists per network; both Siamese branches are forward
//! passes over that same set, so the branches cannot disagree on identical
//! input.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audio::Volume;
use crate::error::{Error, Result};
use crate::tensor::{Mode, Padding, RunningStats, Tape, Tensor, TensorId};

/// Convolution kernel extent on every block (frames, rows, cols).
pub const CONV_KERNEL: [usize; 3] = [3, 3, 3];
/// Batchnorm variance guard.
pub const BN_EPS: f64 = 1e-5;
/// Batchnorm running-stat momentum: `running = m*running + (1-m)*batch`.
pub const BN_MOMENTUM: f64 = 0.9;

/// One conv/batchnorm/relu/maxpool block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub channels: usize,
    pub pool_window: [usize; 3],
    pub pool_stride: [usize; 3],
}

/// Shape contract for the whole embedding stack.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Expected input volume shape: frames, patch rows, patch cols, channels.
    pub input: [usize; 4],
    pub blocks: Vec<BlockConfig>,
    pub embedding_dim: usize,
}

impl NetConfig {
    /// Reference architecture for the default 298x20x20x1 input volume.
    pub fn reference(input: [usize; 4]) -> Self {
        NetConfig {
            input,
            blocks: vec![
                BlockConfig {
                    channels: 16,
                    pool_window: [4, 2, 2],
                    pool_stride: [4, 2, 2],
                },
                BlockConfig {
                    channels: 32,
                    pool_window: [2, 2, 2],
                    pool_stride: [2, 2, 2],
                },
                BlockConfig {
                    channels: 64,
                    pool_window: [2, 2, 2],
                    pool_stride: [2, 2, 2],
                },
            ],
            embedding_dim: 128,
        }
    }

    /// Same layer chain at reduced widths, for fast tests and gradient
    /// checks over every parameter.
    pub fn reduced(input: [usize; 4], channels: [usize; 3], embedding_dim: usize) -> Self {
        let mut cfg = NetConfig::reference(input);
        for (block, c) in cfg.blocks.iter_mut().zip(channels) {
            block.channels = c;
        }
        cfg.embedding_dim = embedding_dim;
        cfg
    }

    /// Symbolically traces the layer chain, returning the volume shape
    /// after each block. Fails when pooling would exhaust an axis.
    pub fn trace_shapes(&self) -> Result<Vec<[usize; 4]>> {
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding width must be positive".into()));
        }
        if self.blocks.is_empty() {
            return Err(Error::Config("layer stack needs at least one block".into()));
        }
        if self.input.contains(&0) {
            return Err(Error::Config(format!(
                "input shape {:?} has an empty axis",
                self.input
            )));
        }
        let mut shapes = Vec::with_capacity(self.blocks.len());
        let mut cur = self.input;
        for (i, block) in self.blocks.iter().enumerate() {
            if block.channels == 0 {
                return Err(Error::Config(format!("block {i} has zero channels")));
            }
            // Same-padded stride-1 convolution keeps spatial dims.
            for (axis, extent) in cur.iter_mut().take(3).enumerate() {
                let (win, stride) = (block.pool_window[axis], block.pool_stride[axis]);
                if stride == 0 || win == 0 {
                    return Err(Error::Config(format!(
                        "block {i} pool window/stride must be positive"
                    )));
                }
                if win > *extent {
                    return Err(Error::Config(format!(
                        "block {i} pool window {win} exceeds axis of {extent}"
                    )));
                }
                *extent = (*extent - win) / stride + 1;
            }
            cur[3] = block.channels;
            shapes.push(cur);
        }
        Ok(shapes)
    }
}

/// All learnable tensors of the embedding network, in checkpoint order.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    pub kernels: Vec<Tensor>,
    pub conv_biases: Vec<Tensor>,
    pub gammas: Vec<Tensor>,
    pub betas: Vec<Tensor>,
    pub dense_w: Tensor,
    pub dense_b: Tensor,
}

fn he_tensor(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("std is finite and positive");
    let n = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape, data).expect("shape matches generated data")
}

impl NetParams {
    /// He-initialized weights (scaled by fan-in), zero biases, identity
    /// batchnorm affine. Deterministic for a given generator state.
    pub fn init(config: &NetConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let shapes = config.trace_shapes()?;
        let [kd, kh, kw] = CONV_KERNEL;
        let mut kernels = Vec::new();
        let mut conv_biases = Vec::new();
        let mut gammas = Vec::new();
        let mut betas = Vec::new();
        let mut cin = config.input[3];
        for block in &config.blocks {
            let co = block.channels;
            kernels.push(he_tensor(vec![co, kd, kh, kw, cin], kd * kh * kw * cin, rng));
            conv_biases.push(Tensor::zeros(vec![co]));
            gammas.push(Tensor::full(vec![co], 1.0));
            betas.push(Tensor::zeros(vec![co]));
            cin = co;
        }
        let last_channels = shapes.last().expect("at least one block")[3];
        let dense_w = he_tensor(
            vec![last_channels, config.embedding_dim],
            last_channels,
            rng,
        );
        let dense_b = Tensor::zeros(vec![config.embedding_dim]);
        Ok(NetParams {
            kernels,
            conv_biases,
            gammas,
            betas,
            dense_w,
            dense_b,
        })
    }

    /// Tensors paired with their stable names, in checkpoint order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for i in 0..self.kernels.len() {
            out.push((format!("block{i}.kernels"), &self.kernels[i]));
            out.push((format!("block{i}.bias"), &self.conv_biases[i]));
            out.push((format!("block{i}.gamma"), &self.gammas[i]));
            out.push((format!("block{i}.beta"), &self.betas[i]));
        }
        out.push(("dense.weight".into(), &self.dense_w));
        out.push(("dense.bias".into(), &self.dense_b));
        out
    }

    /// Mutable view in the same order as [`NetParams::named`].
    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, ((k, b), (g, be))) in self
            .kernels
            .iter_mut()
            .zip(&mut self.conv_biases)
            .zip(self.gammas.iter_mut().zip(&mut self.betas))
            .enumerate()
        {
            out.push((format!("block{i}.kernels"), k));
            out.push((format!("block{i}.bias"), b));
            out.push((format!("block{i}.gamma"), g));
            out.push((format!("block{i}.beta"), be));
        }
        out.push(("dense.weight".into(), &mut self.dense_w));
        out.push(("dense.bias".into(), &mut self.dense_b));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Tape handles for one registration of the parameter set.
pub struct ParamNodes {
    pub kernels: Vec<TensorId>,
    pub conv_biases: Vec<TensorId>,
    pub gammas: Vec<TensorId>,
    pub betas: Vec<TensorId>,
    pub dense_w: TensorId,
    pub dense_b: TensorId,
}

/// Puts every parameter on the tape, as gradient-carrying leaves when
/// `trainable`, else as constants.
pub fn register_params(tape: &mut Tape, params: &NetParams, trainable: bool) -> ParamNodes {
    let mut reg = |t: &Tensor| {
        if trainable {
            tape.leaf(t)
        } else {
            tape.constant(t)
        }
    };
    ParamNodes {
        kernels: params.kernels.iter().map(&mut reg).collect(),
        conv_biases: params.conv_biases.iter().map(&mut reg).collect(),
        gammas: params.gammas.iter().map(&mut reg).collect(),
        betas: params.betas.iter().map(&mut reg).collect(),
        dense_w: reg(&params.dense_w),
        dense_b: reg(&params.dense_b),
    }
}

/// Runs the embedding stack over `[n, frames, rows, cols, c]` (or a single
/// rank-4 volume) and returns `[n, embedding_dim]` unit-norm rows.
///
/// `running` holds one stats entry per block; train mode updates them in
/// place.
pub fn forward_embeddings(
    tape: &mut Tape,
    config: &NetConfig,
    nodes: &ParamNodes,
    input: TensorId,
    mode: Mode,
    running: &mut [RunningStats],
) -> Result<TensorId> {
    if running.len() != config.blocks.len() {
        return Err(Error::Contract(format!(
            "{} running-stat entries for {} blocks",
            running.len(),
            config.blocks.len()
        )));
    }
    let mut x = input;
    for (i, block) in config.blocks.iter().enumerate() {
        let c = tape.conv3d(
            x,
            nodes.kernels[i],
            nodes.conv_biases[i],
            [1, 1, 1],
            Padding::Same,
        )?;
        let b = tape.batchnorm(
            c,
            nodes.gammas[i],
            nodes.betas[i],
            BN_EPS,
            BN_MOMENTUM,
            mode,
            &mut running[i],
        )?;
        let a = tape.relu(b);
        x = tape.maxpool3d(a, block.pool_window, block.pool_stride)?;
    }
    let pooled = tape.global_avg_pool(x)?;
    let rows = if tape.shape(pooled).len() == 1 {
        let c = tape.shape(pooled)[0];
        tape.reshape(pooled, vec![1, c])?
    } else {
        pooled
    };
    let projected = tape.matmul(rows, nodes.dense_w)?;
    let with_bias = tape.add_bias(projected, nodes.dense_b)?;
    tape.l2_normalize(with_bias)
}

/// The embedding network: a shape contract, one parameter set, and the
/// per-block batchnorm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingNet {
    pub config: NetConfig,
    pub params: NetParams,
    pub running: Vec<RunningStats>,
}

impl EmbeddingNet {
    pub fn init(config: NetConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.trace_shapes()?;
        let params = NetParams::init(&config, rng)?;
        let running = config
            .blocks
            .iter()
            .map(|b| RunningStats::new(b.channels))
            .collect();
        Ok(EmbeddingNet {
            config,
            params,
            running,
        })
    }

    /// Deterministic convenience constructor.
    pub fn init_seeded(config: NetConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EmbeddingNet::init(config, &mut rng)
    }

    fn check_volume(&self, volume: &Volume) -> Result<()> {
        if volume.data.shape() != self.config.input {
            return Err(Error::Dimension(format!(
                "volume of shape {:?} against network input {:?}",
                volume.data.shape(),
                self.config.input
            )));
        }
        Ok(())
    }

    pub fn input_shape(&self) -> [usize; 4] {
        self.config.input
    }

    /// Unit-norm embedding of one volume. Running statistics are never
    /// modified here; train mode normalizes by this volume's own batch
    /// statistics, eval mode by the stored running estimates.
    pub fn embed(&self, volume: &Volume, mode: Mode) -> Result<Tensor> {
        self.check_volume(volume)?;
        let mut tape = Tape::new();
        let nodes = register_params(&mut tape, &self.params, false);
        let input = tape.constant(&volume.data);
        let mut running = self.running.clone();
        let out = forward_embeddings(
            &mut tape,
            &self.config,
            &nodes,
            input,
            mode,
            &mut running,
        )?;
        let e = self.config.embedding_dim;
        let row = tape.reshape(out, vec![e])?;
        Ok(tape.tensor(row))
    }

    /// Euclidean distance between the unit embeddings of two volumes,
    /// in `[0, 2]`. Both branches run the same parameter set.
    pub fn siamese_distance(&self, a: &Volume, b: &Volume) -> Result<f64> {
        let ea = self.embed(a, Mode::Eval)?;
        let eb = self.embed(b, Mode::Eval)?;
        Ok(embedding_distance(&ea, &eb))
    }
}

/// Euclidean distance between two equal-length vectors.
pub fn embedding_distance(a: &Tensor, b: &Tensor) -> f64 {
    debug_assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Per-speaker basis vectors used by the classification path during
/// training. Row `i` of `weight` is the basis vector of speaker `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ClassifierHead {
    pub fn init(num_speakers: usize, embedding_dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if num_speakers == 0 || embedding_dim == 0 {
            return Err(Error::Config(
                "classifier head needs speakers and a positive embedding width".into(),
            ));
        }
        Ok(ClassifierHead {
            weight: he_tensor(vec![num_speakers, embedding_dim], embedding_dim, rng),
            bias: Tensor::zeros(vec![num_speakers]),
        })
    }

    pub fn num_speakers(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn embedding_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    /// `weight . embedding + bias` for a single `[E]` embedding.
    pub fn logits(&self, embedding: &Tensor) -> Result<Tensor> {
        if embedding.shape() != [self.embedding_dim()] {
            return Err(Error::Dimension(format!(
                "embedding of shape {:?} against head width {}",
                embedding.shape(),
                self.embedding_dim()
            )));
        }
        let (s, e) = (self.num_speakers(), self.embedding_dim());
        let w = self.weight.data();
        let x = embedding.data();
        let data: Vec<f64> = (0..s)
            .map(|i| {
                self.bias.data()[i]
                    + w[i * e..(i + 1) * e]
                        .iter()
                        .zip(x)
                        .map(|(&wv, &xv)| wv * xv)
                        .sum::<f64>()
            })
            .collect();
        Tensor::new(vec![s], data)
    }
}

/// Tape version of the classifier: `[n, E] . W^T + bias -> [n, S]`.
pub fn classifier_logits(
    tape: &mut Tape,
    embeddings: TensorId,
    weight: TensorId,
    bias: TensorId,
) -> Result<TensorId> {
    let wt = tape.transpose(weight)?;
    let scores = tape.matmul(embeddings, wt)?;
    tape.add_bias(scores, bias)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{waveform_to_volume, WavClip};
    use rand::Rng;

    fn test_config() -> NetConfig {
        NetConfig::reduced([16, 8, 8, 1], [3, 4, 5], 6)
    }

    fn test_volume(seed: u64, frames: usize) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = (frames - 1) * 64 + 64; // hop 64, window 64 below
        let samples: Vec<f64> = (0..n).map(|_| rng.random_range(-0.9..0.9)).collect();
        let clip = WavClip::new(16_000, samples).unwrap();
        waveform_to_volume(&clip, 64, 64, 8).unwrap()
    }

    #[test]
    fn reference_architecture_traces_to_consistent_shapes() {
        let cfg = NetConfig::reference([298, 20, 20, 1]);
        let shapes = cfg.trace_shapes().unwrap();
        assert_eq!(shapes, vec![[74, 10, 10, 16], [37, 5, 5, 32], [18, 2, 2, 64]]);
    }

    #[test]
    fn overpooled_input_is_a_configuration_error() {
        let cfg = NetConfig::reference([8, 2, 2, 1]);
        assert!(matches!(cfg.trace_shapes(), Err(Error::Config(_))));
    }

    #[test]
    fn same_seed_gives_bitwise_identical_parameters() {
        let a = EmbeddingNet::init_seeded(test_config(), 99).unwrap();
        let b = EmbeddingNet::init_seeded(test_config(), 99).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn biases_are_zero_after_init() {
        let net = EmbeddingNet::init_seeded(test_config(), 5).unwrap();
        for b in &net.params.conv_biases {
            assert!(b.data().iter().all(|&v| v == 0.0));
        }
        assert!(net.params.dense_b.data().iter().all(|&v| v == 0.0));
        for (g, b) in net.params.gammas.iter().zip(&net.params.betas) {
            assert!(g.data().iter().all(|&v| v == 1.0));
            assert!(b.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn he_init_variance_tracks_two_over_fan_in() {
        let cfg = NetConfig::reference([298, 20, 20, 1]);
        let net = EmbeddingNet::init_seeded(cfg, 7).unwrap();
        // Third-block kernels: 64*27*32 > 10^4 draws, fan_in = 27*32.
        let k = &net.params.kernels[2];
        let fan_in = 27 * 32;
        let n = k.len() as f64;
        let mean = k.data().iter().sum::<f64>() / n;
        let var = k.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let expect = 2.0 / fan_in as f64;
        assert!(
            (var - expect).abs() < 0.2 * expect,
            "sample variance {var} vs expected {expect}"
        );
    }

    #[test]
    fn embedding_has_unit_norm() {
        let net = EmbeddingNet::init_seeded(test_config(), 3).unwrap();
        let v = test_volume(1, 16);
        for mode in [Mode::Train, Mode::Eval] {
            let e = net.embed(&v, mode).unwrap();
            assert_eq!(e.shape(), &[6]);
            assert!((e.l2_norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn embedding_is_deterministic() {
        let net = EmbeddingNet::init_seeded(test_config(), 3).unwrap();
        let v = test_volume(2, 16);
        let a = net.embed(&v, Mode::Eval).unwrap();
        let b = net.embed(&v, Mode::Eval).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn train_and_eval_modes_differ_when_stats_differ() {
        let mut net = EmbeddingNet::init_seeded(test_config(), 3).unwrap();
        // Move the running estimates away from any batch statistic while
        // keeping enough units alive downstream of relu.
        for stats in &mut net.running {
            for m in &mut stats.mean {
                *m = -0.3;
            }
            for v in &mut stats.var {
                *v = 4.0;
            }
        }
        let v = test_volume(4, 16);
        let train = net.embed(&v, Mode::Train).unwrap();
        let eval = net.embed(&v, Mode::Eval).unwrap();
        assert_ne!(train.data(), eval.data());
    }

    #[test]
    fn embed_never_mutates_running_stats() {
        let net = EmbeddingNet::init_seeded(test_config(), 8).unwrap();
        let before = net.running.clone();
        let v = test_volume(5, 16);
        net.embed(&v, Mode::Train).unwrap();
        net.embed(&v, Mode::Eval).unwrap();
        assert_eq!(net.running, before);
    }

    #[test]
    fn wrong_volume_shape_is_a_dimension_error() {
        let net = EmbeddingNet::init_seeded(test_config(), 3).unwrap();
        let v = test_volume(6, 12);
        assert!(matches!(
            net.embed(&v, Mode::Eval),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn distance_to_self_is_zero_and_symmetric() {
        let net = EmbeddingNet::init_seeded(test_config(), 3).unwrap();
        let a = test_volume(7, 16);
        let b = test_volume(8, 16);
        assert_eq!(net.siamese_distance(&a, &a).unwrap(), 0.0);
        let ab = net.siamese_distance(&a, &b).unwrap();
        let ba = net.siamese_distance(&b, &a).unwrap();
        assert_eq!(ab, ba);
        assert!((0.0..=2.0).contains(&ab));
    }

    #[test]
    fn shared_parameters_move_both_branches_together() {
        let mut net = EmbeddingNet::init_seeded(test_config(), 3).unwrap();
        let v = test_volume(9, 16);
        let before = net.embed(&v, Mode::Eval).unwrap();
        net.params.dense_b.data_mut()[0] += 0.5;
        let after_a = net.embed(&v, Mode::Eval).unwrap();
        let after_b = net.embed(&v, Mode::Eval).unwrap();
        assert_ne!(before.data(), after_a.data());
        assert_eq!(after_a, after_b);
    }

    #[test]
    fn logits_of_zero_embedding_equal_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut head = ClassifierHead::init(5, 3, &mut rng).unwrap();
        head.bias = Tensor::new(vec![5], vec![1.0, -2.0, 0.5, 0.0, 3.0]).unwrap();
        let z = Tensor::zeros(vec![3]);
        let l = head.logits(&z).unwrap();
        assert_eq!(l.data(), head.bias.data());
    }

    #[test]
    fn identity_weight_passes_embedding_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut head = ClassifierHead::init(3, 3, &mut rng).unwrap();
        head.weight = Tensor::new(
            vec![3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        head.bias = Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap();
        let e = Tensor::new(vec![3], vec![0.5, -0.5, 0.25]).unwrap();
        let l = head.logits(&e).unwrap();
        assert_eq!(l.data(), &[0.6, -0.3, 0.55]);
    }

    #[test]
    fn logits_match_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let head = ClassifierHead::init(6, 4, &mut rng).unwrap();
        let e_data: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let e = Tensor::new(vec![4], e_data).unwrap();
        let l = head.logits(&e).unwrap();
        for i in 0..6 {
            let mut acc = head.bias.data()[i];
            for j in 0..4 {
                acc += head.weight.data()[i * 4 + j] * e.data()[j];
            }
            assert!((l.data()[i] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_classifier_agrees_with_direct_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let head = ClassifierHead::init(5, 6, &mut rng).unwrap();
        let e_data: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let e = Tensor::new(vec![6], e_data).unwrap();
        let direct = head.logits(&e).unwrap();

        let mut tape = Tape::new();
        let row = Tensor::new(vec![1, 6], e.data().to_vec()).unwrap();
        let eid = tape.constant(&row);
        let wid = tape.leaf(&head.weight);
        let bid = tape.leaf(&head.bias);
        let l = classifier_logits(&mut tape, eid, wid, bid).unwrap();
        assert!(
            tape.data(l)
                .iter()
                .zip(direct.data())
                .all(|(&a, &b)| (a - b).abs() < 1e-12)
        );
    }
}
