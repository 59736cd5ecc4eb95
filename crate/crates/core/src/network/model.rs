use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{Differencing, Fusion, NetworkConfig, Variant};
use super::NetworkError;
use crate::attention::{attention_forward, AttentionParams, AttentionVars};
use crate::tensor::{Graph, Mode, RunningStats, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct NamedParam {
    pub name: String,
    pub tensor: Tensor<f32>,
}

/// Running statistics of one batch-norm layer; `name` is the layer prefix
/// (`encoder.0.bn`), the stored tensors are `<name>.running_mean` and
/// `<name>.running_var`.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedStats {
    pub name: String,
    pub stats: RunningStats<f32>,
}

#[derive(Debug, Clone, Copy)]
struct ConvBn {
    weight: usize,
    bias: usize,
    scale: usize,
    shift: usize,
    stats: usize,
}

#[derive(Debug, Clone, Copy)]
struct Head {
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy)]
struct AttentionIds {
    w_f: usize,
    w_g: usize,
    w_h: usize,
    gamma: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    encoder: Vec<ConvBn>,
    /// Indexed by output level; applied deepest first.
    seg_decoder: Vec<ConvBn>,
    damage_decoder: Vec<ConvBn>,
    attention: Option<(usize, AttentionIds)>,
    seg_head: Option<Head>,
    damage_head: Head,
}

#[derive(Debug, Clone)]
pub struct Network {
    config: NetworkConfig,
    params: Vec<NamedParam>,
    stats: Vec<NamedStats>,
    layout: Layout,
}

/// Graph outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    /// `B×1×S×S` building probabilities; `None` for the baselines.
    pub seg_pre: Option<Var>,
    pub seg_post: Option<Var>,
    /// `B×C×S×S` per-pixel class distribution.
    pub damage: Var,
    /// `B×N×N` attention map.
    pub attention: Option<Var>,
    /// Fused skip features followed by the fused bottleneck, shallowest first.
    pub fused: Vec<Var>,
}

/// Detached forward outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// `B×1×S×S`. Derived as `1 − p_d(background)` for the baselines.
    pub seg_pre: Tensor<f32>,
    pub seg_post: Tensor<f32>,
    pub damage: Tensor<f32>,
    pub attention: Option<Tensor<f32>>,
}

impl Prediction {
    pub fn from_graph(g: &Graph<f32>, vars: &ForwardVars) -> Self {
        let damage = g.value(vars.damage).detached();
        let derived = || {
            let s = damage.shape();
            let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
            Tensor::from_fn(vec![b, 1, s[2], s[3]], |i| {
                let (n, p) = (i / plane, i % plane);
                1.0 - damage.data()[n * c * plane + p]
            })
        };
        let seg_pre = vars.seg_pre.map_or_else(derived, |v| g.value(v).detached());
        let seg_post = vars.seg_post.map_or_else(derived, |v| g.value(v).detached());
        Self {
            seg_pre,
            seg_post,
            attention: vars.attention.map(|v| g.value(v).detached()),
            damage,
        }
    }
}

struct Builder {
    params: Vec<NamedParam>,
    stats: Vec<NamedStats>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn push(&mut self, name: String, tensor: Tensor<f32>) -> usize {
        self.params.push(NamedParam {
            name,
            tensor: tensor.with_grad(),
        });
        self.params.len() - 1
    }

    fn kaiming(&mut self, shape: Vec<usize>) -> Tensor<f32> {
        let fan_in: usize = shape[1..].iter().product();
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| normal.sample(rng) as f32)
    }

    fn conv_bn(&mut self, prefix: &str, cin: usize, cout: usize) -> ConvBn {
        let w = self.kaiming(vec![cout, cin, 3, 3]);
        let weight = self.push(format!("{prefix}.conv.weight"), w);
        let bias = self.push(format!("{prefix}.conv.bias"), Tensor::zeros(vec![cout]));
        let scale = self.push(format!("{prefix}.bn.scale"), Tensor::ones(vec![cout]));
        let shift = self.push(format!("{prefix}.bn.shift"), Tensor::zeros(vec![cout]));
        self.stats.push(NamedStats {
            name: format!("{prefix}.bn"),
            stats: RunningStats::new(cout),
        });
        ConvBn {
            weight,
            bias,
            scale,
            shift,
            stats: self.stats.len() - 1,
        }
    }

    fn head(&mut self, prefix: &str, cin: usize, cout: usize) -> Head {
        let w = self.kaiming(vec![cout, cin, 1, 1]);
        Head {
            weight: self.push(format!("{prefix}.weight"), w),
            bias: self.push(format!("{prefix}.bias"), Tensor::zeros(vec![cout])),
        }
    }

    /// Decoder blocks for the given skip widths; returned by level.
    fn decoder(&mut self, prefix: &str, skips: &[usize], bottleneck: usize, widths: &[usize]) -> Vec<ConvBn> {
        let depth = widths.len();
        let mut blocks = Vec::with_capacity(depth);
        for level in (0..depth).rev() {
            let below = if level + 1 == depth { bottleneck } else { widths[level + 1] };
            blocks.push(self.conv_bn(&format!("{prefix}.{level}"), below + skips[level], widths[level]));
        }
        blocks.reverse();
        blocks
    }
}

impl Network {
    /// Fresh network with Kaiming-normal convolutions drawn from `seed`.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self, NetworkError> {
        config.validate()?;
        let mut b = Builder {
            params: Vec::new(),
            stats: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let widths = config.channel_widths.clone();
        let depth = config.depth;
        let in_channels = if config.variant == Variant::FcEf { 6 } else { 3 };
        let mut encoder = Vec::with_capacity(depth);
        let mut cin = in_channels;
        for (i, &w) in widths.iter().enumerate() {
            encoder.push(b.conv_bn(&format!("encoder.{i}"), cin, w));
            cin = w;
        }

        let siam = config.variant.is_siam_unet_attn();
        let (seg_decoder, seg_head) = if siam {
            let dec = b.decoder("seg_decoder", &widths, widths[depth - 1], &widths);
            (dec, Some(b.head("seg_head", widths[0], 1)))
        } else {
            (Vec::new(), None)
        };

        let mult = match config.variant.fusion() {
            Some(Fusion::Conc) => 2,
            _ => 1,
        };
        let fused: Vec<usize> = widths.iter().map(|w| w * mult).collect();
        let bottleneck = widths[depth - 1] * mult;
        let damage_decoder = b.decoder("damage_decoder", &fused, bottleneck, &widths);
        let damage_head = b.head("damage_head", widths[0], config.num_damage_classes);

        let attention = if config.variant.has_attention() {
            let level = config.attention_level().expect("validated");
            let d = if level == depth { bottleneck } else { fused[level] };
            let p = AttentionParams::<f32>::init(d, &mut b.rng);
            let ids = AttentionIds {
                w_f: b.push("attention.w_f".into(), p.w_f),
                w_g: b.push("attention.w_g".into(), p.w_g),
                w_h: b.push("attention.w_h".into(), p.w_h),
                gamma: b.push("attention.gamma".into(), p.gamma),
            };
            Some((level, ids))
        } else {
            None
        };

        Ok(Self {
            config,
            params: b.params,
            stats: b.stats,
            layout: Layout {
                encoder,
                seg_decoder,
                damage_decoder,
                attention,
                seg_head,
                damage_head,
            },
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn params(&self) -> &[NamedParam] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedParam] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<f32>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.tensor)
    }

    pub fn stats(&self) -> &[NamedStats] {
        &self.stats
    }

    pub fn stats_mut(&mut self) -> &mut [NamedStats] {
        &mut self.stats
    }

    /// Total number of trainable scalars.
    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Side of the attention grid, if the variant has one.
    pub fn attention_grid(&self) -> Option<usize> {
        self.layout.attention.map(|(level, _)| self.config.resolution(level))
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.clear_grad();
        }
    }

    /// Adds the gradients computed by `g.backward` to the parameters bound
    /// on `g`.
    pub fn absorb_grads(&mut self, g: &Graph<f32>) -> Result<(), NetworkError> {
        for (key, var) in g.bound_params() {
            let p = &mut self.params[key];
            let grad = g.grad(var).ok_or_else(|| NetworkError::MissingGradient(p.name.clone()))?;
            p.tensor.accumulate_grad(grad)?;
        }
        Ok(())
    }

    /// Records a forward pass on `g`. In [`Mode::Train`] batch statistics
    /// are used and the running estimates updated.
    pub fn forward_graph(
        &mut self,
        g: &mut Graph<f32>,
        pre: Var,
        post: Var,
        mode: Mode,
    ) -> Result<ForwardVars, NetworkError> {
        let mut ctx = Ctx {
            config: &self.config,
            params: &self.params,
            stats: &mut self.stats,
            mode,
            g,
        };
        ctx.run(&self.layout, pre, post)
    }

    /// Eval-mode forward pass that leaves the network untouched.
    pub fn forward_graph_eval(&self, g: &mut Graph<f32>, pre: Var, post: Var) -> Result<ForwardVars, NetworkError> {
        let mut stats = self.stats.clone();
        let mut ctx = Ctx {
            config: &self.config,
            params: &self.params,
            stats: &mut stats,
            mode: Mode::Eval,
            g,
        };
        ctx.run(&self.layout, pre, post)
    }

    /// Eval-mode prediction for `3×S×S` or `B×3×S×S` image tensors.
    pub fn predict(&self, pre: &Tensor<f32>, post: &Tensor<f32>) -> Result<Prediction, NetworkError> {
        let mut g = Graph::new();
        let (a, b) = (self.batched(pre)?, self.batched(post)?);
        let a = g.constant(a)?;
        let b = g.constant(b)?;
        let vars = self.forward_graph_eval(&mut g, a, b)?;
        Ok(Prediction::from_graph(&g, &vars))
    }

    /// Forward pass in either mode returning detached outputs.
    pub fn forward(&mut self, pre: &Tensor<f32>, post: &Tensor<f32>, mode: Mode) -> Result<Prediction, NetworkError> {
        let mut g = Graph::new();
        let (a, b) = (self.batched(pre)?, self.batched(post)?);
        let a = g.constant(a)?;
        let b = g.constant(b)?;
        let vars = self.forward_graph(&mut g, a, b, mode)?;
        Ok(Prediction::from_graph(&g, &vars))
    }

    fn batched(&self, x: &Tensor<f32>) -> Result<Tensor<f32>, NetworkError> {
        let s = self.config.input_size;
        match x.shape() {
            [3, h, w] if *h == s && *w == s => Ok(x.detached().reshape(vec![1, 3, s, s])?),
            [_, 3, h, w] if *h == s && *w == s => Ok(x.detached()),
            other => Err(NetworkError::InputShape {
                expected: vec![3, s, s],
                got: other.to_vec(),
            }),
        }
    }
}

struct Ctx<'a> {
    config: &'a NetworkConfig,
    params: &'a [NamedParam],
    stats: &'a mut [NamedStats],
    mode: Mode,
    g: &'a mut Graph<f32>,
}

impl Ctx<'_> {
    fn p(&mut self, key: usize) -> Result<Var, NetworkError> {
        Ok(self.g.param(key, &self.params[key].tensor)?)
    }

    fn conv_bn(&mut self, block: ConvBn, x: Var) -> Result<Var, NetworkError> {
        let w = self.p(block.weight)?;
        let b = self.p(block.bias)?;
        let scale = self.p(block.scale)?;
        let shift = self.p(block.shift)?;
        let y = self.g.conv2d(x, w, Some(b), 1, 1)?;
        let stats = &mut self.stats[block.stats].stats;
        Ok(self.g.batch_norm(y, scale, shift, stats, self.mode, self.config.batch_norm)?)
    }

    /// Down block: conv, ReLU, BN; returns the pre-pool skip and the pooled map.
    fn down(&mut self, block: ConvBn, x: Var) -> Result<(Var, Var), NetworkError> {
        let w = self.p(block.weight)?;
        let b = self.p(block.bias)?;
        let scale = self.p(block.scale)?;
        let shift = self.p(block.shift)?;
        let y = self.g.conv2d(x, w, Some(b), 1, 1)?;
        let y = self.g.relu(y)?;
        let stats = &mut self.stats[block.stats].stats;
        let skip = self.g.batch_norm(y, scale, shift, stats, self.mode, self.config.batch_norm)?;
        let pooled = self.g.max_pool2d(skip)?;
        Ok((skip, pooled))
    }

    /// Up block: bilinear ×2, concat skip, conv, BN, ReLU.
    fn up(&mut self, block: ConvBn, x: Var, skip: Var) -> Result<Var, NetworkError> {
        let x = self.g.upsample_bilinear(x, 2)?;
        let x = self.g.concat_channels(x, skip)?;
        let y = self.conv_bn(block, x)?;
        Ok(self.g.relu(y)?)
    }

    fn encode(&mut self, layout: &Layout, x: Var) -> Result<(Vec<Var>, Var), NetworkError> {
        let mut skips = Vec::with_capacity(layout.encoder.len());
        let mut h = x;
        for &block in &layout.encoder {
            let (skip, pooled) = self.down(block, h)?;
            skips.push(skip);
            h = pooled;
        }
        Ok((skips, h))
    }

    fn decode(&mut self, blocks: &[ConvBn], skips: &[Var], bottleneck: Var) -> Result<Var, NetworkError> {
        let mut h = bottleneck;
        for level in (0..blocks.len()).rev() {
            h = self.up(blocks[level], h, skips[level])?;
        }
        Ok(h)
    }

    fn head(&mut self, head: Head, x: Var) -> Result<Var, NetworkError> {
        let w = self.p(head.weight)?;
        let b = self.p(head.bias)?;
        Ok(self.g.conv2d(x, w, Some(b), 1, 0)?)
    }

    fn fuse(&mut self, fusion: Fusion, a: Var, b: Var) -> Result<Var, NetworkError> {
        Ok(match (fusion, self.config.differencing) {
            (Fusion::Diff, Differencing::Absolute) => self.g.abs_diff(a, b)?,
            (Fusion::Diff, Differencing::Signed) => self.g.sub(a, b)?,
            (Fusion::Conc, _) => self.g.concat_channels(a, b)?,
        })
    }

    fn check_input(&self, x: Var) -> Result<(), NetworkError> {
        let s = self.config.input_size;
        let shape = self.g.shape(x);
        if shape.len() == 4 && shape[1] == 3 && shape[2] == s && shape[3] == s {
            Ok(())
        } else {
            Err(NetworkError::InputShape {
                expected: vec![shape.first().copied().unwrap_or(1), 3, s, s],
                got: shape.to_vec(),
            })
        }
    }

    fn run(&mut self, layout: &Layout, pre: Var, post: Var) -> Result<ForwardVars, NetworkError> {
        self.check_input(pre)?;
        self.check_input(post)?;
        if self.g.shape(pre) != self.g.shape(post) {
            return Err(NetworkError::InputShape {
                expected: self.g.shape(pre).to_vec(),
                got: self.g.shape(post).to_vec(),
            });
        }

        let Some(fusion) = self.config.variant.fusion() else {
            let x = self.g.concat_channels(pre, post)?;
            let (skips, bottom) = self.encode(layout, x)?;
            let h = self.decode(&layout.damage_decoder, &skips, bottom)?;
            let logits = self.head(layout.damage_head, h)?;
            return Ok(ForwardVars {
                seg_pre: None,
                seg_post: None,
                damage: self.g.softmax(logits, 1)?,
                attention: None,
                fused: Vec::new(),
            });
        };

        // Both frames share one pass, so batch statistics cover both.
        let n = self.g.shape(pre)[0];
        let both = self.g.concat_batch(pre, post)?;
        let (skips, bottom) = self.encode(layout, both)?;
        let mut skips_a = Vec::with_capacity(skips.len());
        let mut skips_b = Vec::with_capacity(skips.len());
        for &s in &skips {
            skips_a.push(self.g.batch_slice(s, 0, n)?);
            skips_b.push(self.g.batch_slice(s, n, n)?);
        }
        let bottom_a = self.g.batch_slice(bottom, 0, n)?;
        let bottom_b = self.g.batch_slice(bottom, n, n)?;

        let mut fused = Vec::with_capacity(skips_a.len() + 1);
        for (&a, &b) in skips_a.iter().zip(&skips_b) {
            fused.push(self.fuse(fusion, a, b)?);
        }
        fused.push(self.fuse(fusion, bottom_a, bottom_b)?);
        let mut damage_inputs = fused.clone();

        let mut attention = None;
        if let Some((level, ids)) = layout.attention {
            let vars = AttentionVars {
                w_f: self.p(ids.w_f)?,
                w_g: self.p(ids.w_g)?,
                w_h: self.p(ids.w_h)?,
                gamma: self.p(ids.gamma)?,
            };
            let out = attention_forward(self.g, damage_inputs[level], &vars)?;
            damage_inputs[level] = out.y;
            attention = Some(out.map);
        }

        let (mut seg_pre, mut seg_post) = (None, None);
        if let Some(head) = layout.seg_head {
            let h = self.decode(&layout.seg_decoder, &skips, bottom)?;
            let logits = self.head(head, h)?;
            let p = self.g.sigmoid(logits)?;
            seg_pre = Some(self.g.batch_slice(p, 0, n)?);
            seg_post = Some(self.g.batch_slice(p, n, n)?);
        }

        let depth = layout.encoder.len();
        let h = self.decode(&layout.damage_decoder, &damage_inputs[..depth], damage_inputs[depth])?;
        let logits = self.head(layout.damage_head, h)?;
        Ok(ForwardVars {
            seg_pre,
            seg_post,
            damage: self.g.softmax(logits, 1)?,
            attention,
            fused,
        })
    }
}
