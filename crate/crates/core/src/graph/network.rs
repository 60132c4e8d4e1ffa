use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::NetworkConfig;
use crate::error::{Error, Result};
use crate::tensor::{ConvOptions, ParamStore, Real, Shape, Tape, Tensor, Var};

/// Parameter indices of one convolution.
#[derive(Clone, Debug)]
pub(crate) struct ConvLayer {
    pub weight: usize,
    pub bias: usize,
    pub dilation: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct UpLayer {
    pub weight: usize,
    pub bias: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct IcmLayers {
    pub abstract1: ConvLayer,
    pub abstract2: ConvLayer,
    pub regularize: ConvLayer,
    pub aspp: Vec<ConvLayer>,
    pub fuse: ConvLayer,
    pub side: Option<ConvLayer>,
}

#[derive(Clone, Debug)]
pub(crate) struct AcbLayers {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub icm: Option<IcmLayers>,
    /// Plain side head used when the block has no ICM.
    pub side: Option<ConvLayer>,
}

#[derive(Clone, Debug)]
pub(crate) struct AebLayers {
    pub up: UpLayer,
    pub raw_align: Option<ConvLayer>,
    /// (source AEB index, alignment conv)
    pub dense_align: Vec<(usize, ConvLayer)>,
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub side: Option<ConvLayer>,
}

/// Parameters plus wiring of an ACE-Net instance.
#[derive(Clone, Debug)]
pub struct Network<T> {
    config: NetworkConfig,
    pub params: ParamStore<T>,
    pub(crate) acbs: Vec<AcbLayers>,
    pub(crate) bottleneck: [ConvLayer; 2],
    pub(crate) aebs: Vec<AebLayers>,
    pub(crate) head: ConvLayer,
}

struct Builder<T> {
    params: ParamStore<T>,
    /// `None` when only the parameter layout is wanted.
    rng: Option<ChaCha8Rng>,
    layout: Vec<(String, Shape)>,
}

impl<T: Real> Builder<T> {
    fn add(&mut self, name: String, shape: Shape, std: f64) -> Result<usize> {
        let id = self.layout.len();
        if let Some(rng) = self.rng.as_mut() {
            let tensor = if std == 0.0 {
                Tensor::zeros(shape)
            } else {
                let normal = Normal::new(0.0, std).expect("positive std");
                Tensor::from_fn(shape, |_| T::lit(normal.sample(rng)))
            };
            self.params.insert(name.clone(), tensor)?;
        }
        self.layout.push((name, shape));
        Ok(id)
    }

    /// Fan-in-scaled normal weights (std = sqrt(2 / fan_in)), zero bias.
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, dilation: usize) -> Result<ConvLayer> {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let weight = self.add(format!("{name}/weight"), Shape::new(cout, cin, k, k), std)?;
        let bias = self.add(format!("{name}/bias"), Shape::new(cout, 1, 1, 1), 0.0)?;
        Ok(ConvLayer { weight, bias, dilation })
    }

    /// Logits head: 1x1 with small weights (std = 0.1 * sqrt(1 / cin)) so
    /// training starts near uniform class probabilities.
    fn classifier(&mut self, name: &str, cin: usize, classes: usize) -> Result<ConvLayer> {
        let std = 0.1 * (1.0 / cin as f64).sqrt();
        let weight = self.add(format!("{name}/weight"), Shape::new(classes, cin, 1, 1), std)?;
        let bias = self.add(format!("{name}/bias"), Shape::new(classes, 1, 1, 1), 0.0)?;
        Ok(ConvLayer { weight, bias, dilation: 1 })
    }

    /// Each output pixel of the 2x2 transposed convolution sees one tap
    /// per input channel, so the fan-in is `cin`.
    fn up(&mut self, name: &str, cin: usize, cout: usize) -> Result<UpLayer> {
        let std = (2.0 / cin as f64).sqrt();
        let weight = self.add(format!("{name}/weight"), Shape::new(cin, cout, 2, 2), std)?;
        let bias = self.add(format!("{name}/bias"), Shape::new(cout, 1, 1, 1), 0.0)?;
        Ok(UpLayer { weight, bias })
    }
}

/// Tensors produced inside one contracting block.
#[derive(Clone, Debug)]
pub struct AcbTensors {
    pub conv1_out: Var,
    pub conv2_out: Var,
    /// Feature carried to the expansive side (ICM output when enabled).
    pub skip: Var,
    pub pooled: Var,
    /// Side logits at the block's own resolution.
    pub side_logits: Option<Var>,
}

/// Tensors produced inside one expansive block.
#[derive(Clone, Debug)]
pub struct AebTensors {
    pub msa_out: Var,
    pub block_out: Var,
    pub side_logits: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct BlockTensors {
    pub acb: Vec<AcbTensors>,
    pub bottleneck_out: Var,
    pub aeb: Vec<AebTensors>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutputs {
    pub final_logits: Var,
    /// ACB-1..ACB-depth then AEB-1..AEB-depth, each resized to the input
    /// resolution. Empty without deep supervision.
    pub side_logits: Vec<Var>,
    pub blocks: BlockTensors,
}

impl<T: Real> Network<T> {
    /// Builds the parameter set for `config`; weights are a pure function of
    /// `(config, seed)`.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        Self::build(config, Some(ChaCha8Rng::seed_from_u64(seed))).map(|(net, _)| net)
    }

    /// Names and shapes of every parameter `config` produces, in store order,
    /// without allocating any of them.
    pub fn layout(config: &NetworkConfig) -> Result<Vec<(String, Shape)>> {
        Self::build(config.clone(), None).map(|(_, layout)| layout)
    }

    fn build(config: NetworkConfig, rng: Option<ChaCha8Rng>) -> Result<(Self, Vec<(String, Shape)>)> {
        config.validate()?;
        let mut b = Builder {
            params: ParamStore::new(),
            rng,
            layout: Vec::new(),
        };
        let cfg = &config;
        let classes = cfg.num_classes;
        let ds = cfg.deep_supervision;

        let mut acbs = Vec::with_capacity(cfg.depth);
        let mut cin = cfg.in_channels;
        for level in 1..=cfg.depth {
            let w = cfg.level_width(level);
            let p = format!("acb{level}");
            let conv1 = b.conv(&format!("{p}/conv1"), cin, w, 3, 1)?;
            let conv2 = b.conv(&format!("{p}/conv2"), w, w, 3, 1)?;
            let (icm, side) = if cfg.icm_enabled.contains(&level) {
                let abstract1 = b.conv(&format!("{p}/icm/abstract1"), w, w, 3, 1)?;
                let abstract2 = b.conv(&format!("{p}/icm/abstract2"), w, w, 3, 1)?;
                let regularize = b.conv(&format!("{p}/icm/regularize"), 2 * w, w, 1, 1)?;
                let aspp = cfg
                    .aspp_rates
                    .iter()
                    .map(|&r| {
                        let k = if r == 1 { 1 } else { 3 };
                        b.conv(&format!("{p}/icm/aspp/branch_r{r}"), w, w, k, r)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let pyramid = w * cfg.aspp_rates.len();
                let fuse = b.conv(&format!("{p}/icm/fuse"), pyramid, w, 1, 1)?;
                let side = if ds {
                    Some(b.classifier(&format!("{p}/icm/side"), pyramid, classes)?)
                } else {
                    None
                };
                let icm = IcmLayers {
                    abstract1,
                    abstract2,
                    regularize,
                    aspp,
                    fuse,
                    side,
                };
                (Some(icm), None)
            } else if ds {
                (None, Some(b.classifier(&format!("{p}/side"), w, classes)?))
            } else {
                (None, None)
            };
            acbs.push(AcbLayers { conv1, conv2, icm, side });
            cin = w;
        }

        let bw = cfg.bottleneck_width();
        let bottleneck = [
            b.conv("bottleneck/conv1", cfg.level_width(cfg.depth), bw, 3, 1)?,
            b.conv("bottleneck/conv2", bw, bw, 3, 1)?,
        ];

        let mut aebs = Vec::with_capacity(cfg.depth);
        for i in 1..=cfg.depth {
            let w = cfg.level_width(cfg.aeb_level(i));
            let p = format!("aeb{i}");
            let up = b.up(&format!("{p}/up"), 2 * w, w)?;
            let raw_align = if cfg.msa_raw_image.contains(&i) {
                Some(b.conv(&format!("{p}/msa/raw_align"), cfg.in_channels, w, 1, 1)?)
            } else {
                None
            };
            let dense_align = cfg
                .dense_sources(i)
                .into_iter()
                .map(|j| {
                    let src_w = cfg.level_width(cfg.aeb_level(j));
                    Ok((j, b.conv(&format!("{p}/msa/dense_from_aeb{j}"), src_w, w, 1, 1)?))
                })
                .collect::<Result<Vec<_>>>()?;
            let sources = 2 + raw_align.is_some() as usize + dense_align.len();
            let conv1 = b.conv(&format!("{p}/conv1"), sources * w, w, 3, 1)?;
            let conv2 = b.conv(&format!("{p}/conv2"), w, w, 3, 1)?;
            let side = if ds {
                Some(b.classifier(&format!("{p}/side"), w, classes)?)
            } else {
                None
            };
            aebs.push(AebLayers {
                up,
                raw_align,
                dense_align,
                conv1,
                conv2,
                side,
            });
        }
        let head = b.classifier("head", cfg.base_width, classes)?;

        let net = Network {
            config,
            params: b.params,
            acbs,
            bottleneck,
            aebs,
            head,
        };
        Ok((net, b.layout))
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    /// Names of parameters that feed only side outputs.
    pub fn side_head_param_names(&self) -> Vec<String> {
        let mut layers: Vec<&ConvLayer> = Vec::new();
        for acb in &self.acbs {
            layers.extend(acb.side.iter());
            layers.extend(acb.icm.iter().filter_map(|i| i.side.as_ref()));
        }
        for aeb in &self.aebs {
            layers.extend(aeb.side.iter());
        }
        layers
            .into_iter()
            .flat_map(|l| [l.weight, l.bias])
            .map(|id| self.params.get(id).name.clone())
            .collect()
    }

    /// Starts a forward pass on `tape`, binding every parameter as a leaf.
    pub fn begin<'a>(&'a self, tape: &'a mut Tape<T>) -> Forward<'a, T> {
        let bound = self.params.bind(tape);
        Forward { net: self, tape, bound }
    }

    /// Starts a forward pass using caller-provided leaves, one per parameter
    /// in store order.
    pub fn begin_with<'a>(&'a self, tape: &'a mut Tape<T>, bound: Vec<Var>) -> Result<Forward<'a, T>> {
        if bound.len() != self.params.len() {
            return Err(Error::Usage(format!(
                "{} bindings for {} parameters",
                bound.len(),
                self.params.len()
            )));
        }
        Ok(Forward { net: self, tape, bound })
    }

    /// Full forward pass. Returns the outputs and the parameter bindings for
    /// collecting gradients afterwards.
    pub fn forward(&self, tape: &mut Tape<T>, image: Var) -> Result<(ForwardOutputs, Vec<Var>)> {
        let mut fwd = self.begin(tape);
        let out = fwd.run(image)?;
        Ok((out, fwd.bound))
    }

    /// Softmax class probabilities for an image batch, `[n, classes, h, w]`.
    pub fn predict(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let (out, _) = self.forward(&mut tape, x)?;
        Ok(softmax_channels(tape.value(out.final_logits)))
    }
}

/// Per-pixel softmax over the channel axis.
pub fn softmax_channels<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let s = logits.shape();
    let (c, plane) = (s.c(), s.plane());
    let src = logits.data();
    let mut out = vec![T::zero(); src.len()];
    for n in 0..s.n() {
        for p in 0..plane {
            let idx = |k: usize| (n * c + k) * plane + p;
            let max = (0..c).map(|k| src[idx(k)]).fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for k in 0..c {
                let e = (src[idx(k)] - max).exp();
                out[idx(k)] = e;
                sum += e;
            }
            for k in 0..c {
                out[idx(k)] = out[idx(k)] / sum;
            }
        }
    }
    Tensor::new(s, out).expect("same shape")
}

/// One forward pass in progress: the network, its tape, and the leaves the
/// parameters are bound to.
pub struct Forward<'a, T: Real> {
    net: &'a Network<T>,
    pub tape: &'a mut Tape<T>,
    pub bound: Vec<Var>,
}

impl<T: Real> Forward<'_, T> {
    fn conv(&mut self, layer: &ConvLayer, x: Var) -> Result<Var> {
        let (w, b) = (self.bound[layer.weight], self.bound[layer.bias]);
        self.tape.conv2d(x, w, Some(b), ConvOptions::dilated(layer.dilation))
    }

    fn conv_relu(&mut self, layer: &ConvLayer, x: Var) -> Result<Var> {
        let y = self.conv(layer, x)?;
        Ok(self.tape.relu(y))
    }

    /// Contracting block at `level` (1-based): two 3x3 convolutions, the
    /// optional context branch, the side head and 2x2 pooling.
    pub fn acb(&mut self, level: usize, x: Var) -> Result<AcbTensors> {
        let net = self.net;
        let layers = level
            .checked_sub(1)
            .and_then(|i| net.acbs.get(i))
            .ok_or_else(|| Error::Usage(format!("no ACB at level {level}")))?;
        let conv1_out = self.conv_relu(&layers.conv1, x)?;
        let conv2_out = self.conv_relu(&layers.conv2, conv1_out)?;
        let (skip, side_logits) = if layers.icm.is_some() {
            let (skip, side) = self.icm(level, conv1_out, conv2_out)?;
            (skip, side)
        } else {
            let side = match &layers.side {
                Some(l) => Some(self.conv(l, conv2_out)?),
                None => None,
            };
            (conv2_out, side)
        };
        let pooled = self.tape.maxpool2x2(conv2_out)?;
        Ok(AcbTensors {
            conv1_out,
            conv2_out,
            skip,
            pooled,
            side_logits,
        })
    }

    /// Context branch of ACB-`level`: a 3x3 convolution on each of the two
    /// block features, concatenation, 1x1 regularisation, the dilated
    /// pyramid, then a 1x1 fuse for the skip and a parallel 1x1 side head.
    pub fn icm(&mut self, level: usize, conv1_out: Var, conv2_out: Var) -> Result<(Var, Option<Var>)> {
        let net = self.net;
        let icm = level
            .checked_sub(1)
            .and_then(|i| net.acbs.get(i))
            .and_then(|a| a.icm.as_ref())
            .ok_or_else(|| Error::Usage(format!("ACB-{level} has no context branch")))?;
        let a1 = self.conv_relu(&icm.abstract1, conv1_out)?;
        let a2 = self.conv_relu(&icm.abstract2, conv2_out)?;
        let cat = self.tape.concat_channels(&[a1, a2])?;
        let reg = self.conv_relu(&icm.regularize, cat)?;
        let pyramid = self.aspp(&icm.aspp, reg)?;
        let skip = self.conv_relu(&icm.fuse, pyramid)?;
        let side = match &icm.side {
            Some(l) => Some(self.conv(l, pyramid)?),
            None => None,
        };
        Ok((skip, side))
    }

    /// One relu'd branch per dilation rate, concatenated in rate order.
    fn aspp(&mut self, branches: &[ConvLayer], x: Var) -> Result<Var> {
        let outs = branches
            .iter()
            .map(|l| self.conv_relu(l, x))
            .collect::<Result<Vec<_>>>()?;
        self.tape.concat_channels(&outs)
    }

    /// Dilated pyramid of ACB-`level` applied to `x`.
    pub fn aspp_at(&mut self, level: usize, x: Var) -> Result<Var> {
        let net = self.net;
        let icm = level
            .checked_sub(1)
            .and_then(|i| net.acbs.get(i))
            .and_then(|a| a.icm.as_ref())
            .ok_or_else(|| Error::Usage(format!("ACB-{level} has no context branch")))?;
        self.aspp(&icm.aspp, x)
    }

    /// Multi-source aggregation for AEB-`i`: `[up, skip, raw?, dense...]`,
    /// with the raw image and dense inputs resized to the level and aligned
    /// to the level width by 1x1 convolutions.
    pub fn msa(&mut self, i: usize, up: Var, skip: Var, raw_image: Var, prev_aebs: &[Var]) -> Result<Var> {
        let net = self.net;
        let layers = i
            .checked_sub(1)
            .and_then(|k| net.aebs.get(k))
            .ok_or_else(|| Error::Usage(format!("no AEB-{i}")))?;
        let s = self.tape.shape(up);
        let (h, w) = (s.h(), s.w());
        let mut sources = vec![up, skip];
        if let Some(l) = &layers.raw_align {
            let raw = self.tape.resize_bilinear(raw_image, h, w)?;
            sources.push(self.conv(l, raw)?);
        }
        for (j, l) in &layers.dense_align {
            let src = *prev_aebs
                .get(j - 1)
                .ok_or_else(|| Error::Usage(format!("AEB-{i} needs the output of AEB-{j}")))?;
            let resized = self.tape.resize_bilinear(src, h, w)?;
            sources.push(self.conv(l, resized)?);
        }
        self.tape.concat_channels(&sources)
    }

    /// Expansive block: two 3x3 convolutions and a 1x1 side head.
    pub fn aeb(&mut self, i: usize, msa_out: Var) -> Result<(Var, Option<Var>)> {
        let net = self.net;
        let layers = i
            .checked_sub(1)
            .and_then(|k| net.aebs.get(k))
            .ok_or_else(|| Error::Usage(format!("no AEB-{i}")))?;
        let h = self.conv_relu(&layers.conv1, msa_out)?;
        let out = self.conv_relu(&layers.conv2, h)?;
        let side = match &layers.side {
            Some(l) => Some(self.conv(l, out)?),
            None => None,
        };
        Ok((out, side))
    }

    pub fn run(&mut self, image: Var) -> Result<ForwardOutputs> {
        let net = self.net;
        let cfg = &net.config;
        let s = self.tape.shape(image);
        if s.c() != cfg.in_channels {
            return Err(Error::shape(
                "forward",
                "image",
                format!("expected {} channels, got {}", cfg.in_channels, s.c()),
            ));
        }
        let m = cfg.size_multiple();
        if s.h() % m != 0 || s.w() % m != 0 {
            return Err(Error::shape(
                "forward",
                "image",
                format!(
                    "{}x{} is not divisible by 2^depth = {m}; reflect-pad the image first",
                    s.h(),
                    s.w()
                ),
            ));
        }

        let mut acb = Vec::with_capacity(cfg.depth);
        let mut cur = image;
        for level in 1..=cfg.depth {
            let t = self.acb(level, cur)?;
            cur = t.pooled;
            acb.push(t);
        }
        let b1 = self.conv_relu(&net.bottleneck[0], cur)?;
        let bottleneck_out = self.conv_relu(&net.bottleneck[1], b1)?;

        let mut aeb: Vec<AebTensors> = Vec::with_capacity(cfg.depth);
        let mut prev_outs: Vec<Var> = Vec::with_capacity(cfg.depth);
        let mut below = bottleneck_out;
        for i in 1..=cfg.depth {
            let layers = &net.aebs[i - 1];
            let up = self.tape.conv_transpose2x2(
                below,
                self.bound[layers.up.weight],
                Some(self.bound[layers.up.bias]),
            )?;
            let skip = acb[cfg.aeb_level(i) - 1].skip;
            let msa_out = self.msa(i, up, skip, image, &prev_outs)?;
            let (block_out, side_logits) = self.aeb(i, msa_out)?;
            aeb.push(AebTensors {
                msa_out,
                block_out,
                side_logits,
            });
            prev_outs.push(block_out);
            below = block_out;
        }
        let final_logits = self.conv(&net.head, below)?;

        let mut side_logits = Vec::with_capacity(cfg.side_output_count());
        let raw_sides: Vec<Var> = acb
            .iter()
            .filter_map(|t| t.side_logits)
            .chain(aeb.iter().filter_map(|t| t.side_logits))
            .collect();
        for v in raw_sides {
            side_logits.push(self.tape.resize_bilinear(v, s.h(), s.w())?);
        }
        Ok(ForwardOutputs {
            final_logits,
            side_logits,
            blocks: BlockTensors {
                acb,
                bottleneck_out,
                aeb,
            },
        })
    }
}
