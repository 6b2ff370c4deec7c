//! Executes a [`NetworkSpec`] with its [`Parameters`]: inference, cached
//! training forward, and reverse-mode backward.

use crate::error::{Error, Result};
use crate::net::ops::{self, ConvGeometry, NormCache};
use crate::net::params::{init_parameters, Parameters};
use crate::net::spec::{
    AsppSpec, ConvBlockSpec, ConvSpec, NetworkSpec, ResidualBlockSpec, Skip, StageBlock, UpsampleSpec,
};
use crate::net::tensor::Tensor;

const AXES: [char; 3] = ['x', 'y', 'z'];

struct ConvCache {
    input: Tensor,
    geom: ConvGeometry,
}

struct BlockCache {
    conv: ConvCache,
    norm: NormCache,
    pre_act: Tensor,
}

enum StageCache {
    Plain(Vec<BlockCache>),
    Residual {
        body: Vec<BlockCache>,
        /// The projection reads the first body block's cached input.
        skip: Option<ConvGeometry>,
    },
}

struct AsppCache {
    branches: Vec<BlockCache>,
    fuse: BlockCache,
}

struct DecoderCache {
    up_input: Tensor,
    block: StageCache,
}

/// Intermediate state saved by [`Network::forward_train`].
pub struct ForwardCache {
    stem: Option<BlockCache>,
    aspp: Option<AsppCache>,
    encoder: Vec<StageCache>,
    bottleneck: Option<StageCache>,
    decoder: Vec<DecoderCache>,
    head: Option<ConvCache>,
}

fn conv_fwd(p: &Parameters, c: &ConvSpec, x: &Tensor) -> (Tensor, ConvGeometry) {
    let geom = ConvGeometry::new(x.dims, c.kernel, c.stride, c.dilation);
    let y = ops::conv_forward(x, p.get(&c.weight_name()), p.get(&c.bias_name()), c.out_channels, &geom);
    (y, geom)
}

fn conv_bwd(p: &Parameters, c: &ConvSpec, cache: &ConvCache, g: &Tensor, grads: &mut Parameters) -> Tensor {
    conv_bwd_parts(p, c, &cache.input, &cache.geom, g, grads)
}

fn conv_bwd_parts(
    p: &Parameters,
    c: &ConvSpec,
    input: &Tensor,
    geom: &ConvGeometry,
    g: &Tensor,
    grads: &mut Parameters,
) -> Tensor {
    let (wn, bn) = (c.weight_name(), c.bias_name());
    let mut gw = grads.take(&wn);
    let mut gb = grads.take(&bn);
    let gi = ops::conv_backward(input, p.get(&wn), c.out_channels, geom, g, &mut gw, &mut gb);
    grads.restore(&wn, gw);
    grads.restore(&bn, gb);
    gi
}

fn block_fwd(p: &Parameters, b: &ConvBlockSpec, x: Tensor, keep: bool) -> (Tensor, Option<BlockCache>) {
    let (y, geom) = conv_fwd(p, &b.conv, &x);
    let (n, norm) = ops::instance_norm_forward(&y, p.get(&b.scale_name()), p.get(&b.shift_name()));
    let out = ops::leaky_relu_forward(&n);
    let cache = keep.then(|| BlockCache {
        conv: ConvCache { input: x, geom },
        norm,
        pre_act: n,
    });
    (out, cache)
}

fn block_bwd(p: &Parameters, b: &ConvBlockSpec, cache: &BlockCache, g: &Tensor, grads: &mut Parameters) -> Tensor {
    let g = ops::leaky_relu_backward(&cache.pre_act, g);
    let (sn, hn) = (b.scale_name(), b.shift_name());
    let mut gs = grads.take(&sn);
    let mut gh = grads.take(&hn);
    let g = ops::instance_norm_backward(&cache.norm, p.get(&sn), &g, &mut gs, &mut gh);
    grads.restore(&sn, gs);
    grads.restore(&hn, gh);
    conv_bwd(p, &b.conv, &cache.conv, &g, grads)
}

fn chain_fwd(p: &Parameters, blocks: &[ConvBlockSpec], mut x: Tensor, keep: bool) -> (Tensor, Vec<BlockCache>) {
    let mut caches = Vec::new();
    for b in blocks {
        let (y, c) = block_fwd(p, b, x, keep);
        caches.extend(c);
        x = y;
    }
    (x, caches)
}

fn chain_bwd(
    p: &Parameters,
    blocks: &[ConvBlockSpec],
    caches: &[BlockCache],
    mut g: Tensor,
    grads: &mut Parameters,
) -> Tensor {
    for (b, c) in blocks.iter().zip(caches).rev() {
        g = block_bwd(p, b, c, &g, grads);
    }
    g
}

fn residual_fwd(p: &Parameters, r: &ResidualBlockSpec, x: Tensor, keep: bool) -> (Tensor, Option<StageCache>) {
    let (skip_out, skip_geom) = match &r.skip {
        Skip::Identity => (x.clone(), None),
        Skip::Projection(c) => {
            let (y, geom) = conv_fwd(p, c, &x);
            (y, Some(geom))
        }
    };
    let (mut out, body) = chain_fwd(p, &r.body, x, keep);
    out.add_assign(&skip_out);
    let cache = keep.then(|| StageCache::Residual {
        skip: skip_geom,
        body,
    });
    (out, cache)
}

fn residual_bwd(
    p: &Parameters,
    r: &ResidualBlockSpec,
    body: &[BlockCache],
    skip: Option<&ConvGeometry>,
    g: &Tensor,
    grads: &mut Parameters,
) -> Tensor {
    let mut gi = chain_bwd(p, &r.body, body, g.clone(), grads);
    match (&r.skip, skip) {
        (Skip::Identity, _) => gi.add_assign(g),
        (Skip::Projection(c), Some(geom)) => {
            gi.add_assign(&conv_bwd_parts(p, c, &body[0].conv.input, geom, g, grads));
        }
        (Skip::Projection(_), None) => unreachable!("projection cache missing"),
    }
    gi
}

fn stage_fwd(p: &Parameters, s: &StageBlock, x: Tensor, keep: bool) -> (Tensor, Option<StageCache>) {
    match s {
        StageBlock::Plain(blocks) => {
            let (y, c) = chain_fwd(p, blocks, x, keep);
            (y, keep.then_some(StageCache::Plain(c)))
        }
        StageBlock::Residual(r) => residual_fwd(p, r, x, keep),
    }
}

fn stage_bwd(p: &Parameters, s: &StageBlock, cache: &StageCache, g: &Tensor, grads: &mut Parameters) -> Tensor {
    match (s, cache) {
        (StageBlock::Plain(blocks), StageCache::Plain(c)) => chain_bwd(p, blocks, c, g.clone(), grads),
        (StageBlock::Residual(r), StageCache::Residual { body, skip }) => {
            residual_bwd(p, r, body, skip.as_ref(), g, grads)
        }
        _ => unreachable!("stage cache kind mismatch"),
    }
}

fn aspp_fwd(p: &Parameters, a: &AsppSpec, x: Tensor, keep: bool) -> (Tensor, Option<AsppCache>) {
    let mut caches = Vec::new();
    let mut cat: Option<Tensor> = None;
    for b in &a.branches {
        let (y, c) = block_fwd(p, b, x.clone(), keep);
        caches.extend(c);
        cat = Some(match cat {
            None => y,
            Some(acc) => Tensor::concat_channels(&acc, &y),
        });
    }
    let cat = cat.expect("aspp has at least one branch");
    let (out, fuse) = block_fwd(p, &a.fuse, cat, keep);
    let cache = fuse.map(|fuse| AsppCache { branches: caches, fuse });
    (out, cache)
}

fn aspp_bwd(p: &Parameters, a: &AsppSpec, cache: &AsppCache, g: &Tensor, grads: &mut Parameters) -> Tensor {
    let mut rest = block_bwd(p, &a.fuse, &cache.fuse, g, grads);
    let mut gi: Option<Tensor> = None;
    for (b, c) in a.branches.iter().zip(&cache.branches) {
        let (head, tail) = rest.split_channels(b.conv.out_channels);
        rest = tail;
        let gb = block_bwd(p, b, c, &head, grads);
        match gi.as_mut() {
            None => gi = Some(gb),
            Some(acc) => acc.add_assign(&gb),
        }
    }
    gi.expect("aspp has at least one branch")
}

fn up_fwd(p: &Parameters, u: &UpsampleSpec, x: &Tensor) -> Tensor {
    ops::upsample_forward(x, p.get(&u.weight_name()), p.get(&u.bias_name()), u.out_channels, u.stride)
}

fn up_bwd(p: &Parameters, u: &UpsampleSpec, input: &Tensor, g: &Tensor, grads: &mut Parameters) -> Tensor {
    let (wn, bn) = (u.weight_name(), u.bias_name());
    let mut gw = grads.take(&wn);
    let mut gb = grads.take(&bn);
    let gi = ops::upsample_backward(input, p.get(&wn), u.out_channels, u.stride, g, &mut gw, &mut gb);
    grads.restore(&wn, gw);
    grads.restore(&bn, gb);
    gi
}

/// A network spec bound to concrete weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub spec: NetworkSpec,
    pub params: Parameters,
}

impl Network {
    pub fn new(spec: NetworkSpec, params: Parameters) -> Result<Self> {
        params.check_against(&spec)?;
        Ok(Network { spec, params })
    }

    pub fn init(spec: NetworkSpec, seed: u64) -> Self {
        let params = init_parameters(&spec, seed);
        Network { spec, params }
    }

    /// Rejects inputs whose channel count or spatial extent the network
    /// cannot process.
    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.channels != self.spec.in_channels {
            return Err(Error::Shape(format!(
                "network expects {} input channel(s), got {}",
                self.spec.in_channels, x.channels
            )));
        }
        if x.batch == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        for a in 0..3 {
            let div = 1usize << self.spec.pools_per_axis[a];
            if x.dims[a] == 0 || x.dims[a] % div != 0 {
                return Err(Error::Shape(format!(
                    "axis {} extent {} is not divisible by {div} ({} pooling step(s))",
                    AXES[a], x.dims[a], self.spec.pools_per_axis[a]
                )));
            }
        }
        Ok(())
    }

    fn run(&self, x: &Tensor, keep: bool) -> Result<(Tensor, Option<ForwardCache>)> {
        self.check_input(x)?;
        let p = &self.params;
        let s = &self.spec;
        let mut x = x.clone();

        let mut stem = None;
        if let Some(b) = &s.stem {
            let (y, c) = block_fwd(p, b, x, keep);
            stem = c;
            x = y;
        }
        let mut aspp = None;
        if let Some(a) = &s.aspp {
            let (y, c) = aspp_fwd(p, a, x, keep);
            aspp = c;
            x = y;
        }
        let mut encoder = Vec::new();
        let mut skips = Vec::new();
        for st in &s.encoder {
            let (y, c) = stage_fwd(p, st, x, keep);
            encoder.extend(c);
            skips.push(y.clone());
            x = y;
        }
        let mut bottleneck = None;
        if let Some(st) = &s.bottleneck {
            let (y, c) = stage_fwd(p, st, x, keep);
            bottleneck = c;
            x = y;
        }
        let mut decoder = Vec::new();
        for d in &s.decoder {
            let up = up_fwd(p, &d.upsample, &x);
            let skip = skips
                .get(d.level)
                .ok_or_else(|| Error::Shape(format!("decoder level {} has no encoder skip", d.level)))?;
            if up.dims != skip.dims {
                return Err(Error::Shape(format!(
                    "decoder level {} upsampled to {:?} but skip is {:?}",
                    d.level, up.dims, skip.dims
                )));
            }
            let cat = Tensor::concat_channels(&up, skip);
            let (y, c) = stage_fwd(p, &d.block, cat, keep);
            if let Some(c) = c {
                decoder.push(DecoderCache { up_input: x, block: c });
            }
            x = y;
        }
        let mut head = None;
        if let Some(h) = &s.head {
            let (y, geom) = conv_fwd(p, h, &x);
            if keep {
                head = Some(ConvCache { input: x, geom });
            }
            x = y;
        }
        let cache = keep.then_some(ForwardCache {
            stem,
            aspp,
            encoder,
            bottleneck,
            decoder,
            head,
        });
        Ok((x, cache))
    }

    /// Raw class scores (pre-softmax).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.run(x, false)?.0)
    }

    /// Per-voxel class probabilities.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        Ok(ops::softmax_channels(&self.forward(x)?))
    }

    pub fn forward_train(&self, x: &Tensor) -> Result<(Tensor, ForwardCache)> {
        let (y, c) = self.run(x, true)?;
        Ok((y, c.expect("cache kept in training mode")))
    }

    /// Gradients of a scalar loss w.r.t. every parameter, given its gradient
    /// w.r.t. the logits.
    pub fn backward(&self, cache: &ForwardCache, grad_logits: &Tensor) -> Parameters {
        let p = &self.params;
        let s = &self.spec;
        let mut grads = p.zeros_like();
        let mut g = grad_logits.clone();

        if let (Some(h), Some(c)) = (&s.head, &cache.head) {
            g = conv_bwd(p, h, c, &g, &mut grads);
        }
        let mut skip_grads: Vec<Option<Tensor>> = vec![None; s.encoder.len()];
        for (d, c) in s.decoder.iter().zip(&cache.decoder).rev() {
            let gcat = stage_bwd(p, &d.block, &c.block, &g, &mut grads);
            let (gup, gskip) = gcat.split_channels(d.upsample.out_channels);
            match skip_grads[d.level].as_mut() {
                None => skip_grads[d.level] = Some(gskip),
                Some(acc) => acc.add_assign(&gskip),
            }
            g = up_bwd(p, &d.upsample, &c.up_input, &gup, &mut grads);
        }
        if let (Some(st), Some(c)) = (&s.bottleneck, &cache.bottleneck) {
            g = stage_bwd(p, st, c, &g, &mut grads);
        }
        for (level, (st, c)) in s.encoder.iter().zip(&cache.encoder).enumerate().rev() {
            if let Some(gs) = &skip_grads[level] {
                g.add_assign(gs);
            }
            g = stage_bwd(p, st, c, &g, &mut grads);
        }
        if let (Some(a), Some(c)) = (&s.aspp, &cache.aspp) {
            g = aspp_bwd(p, a, c, &g, &mut grads);
        }
        if let (Some(b), Some(c)) = (&s.stem, &cache.stem) {
            block_bwd(p, b, c, &g, &mut grads);
        }
        grads
    }
}

/// Standalone residual block, handy for probing the skip path in isolation.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub spec: ResidualBlockSpec,
    pub params: Parameters,
}

impl ResidualBlock {
    pub fn new(in_channels: usize, out_channels: usize, kernel: [usize; 3], stride: [usize; 3], seed: u64) -> Self {
        let spec = ResidualBlockSpec::new("block", in_channels, out_channels, kernel, stride);
        let mut net = NetworkSpec::empty();
        net.bottleneck = Some(StageBlock::Residual(spec.clone()));
        let params = init_parameters(&net, seed);
        ResidualBlock { spec, params }
    }

    /// Zeroes every body weight and bias so the block reduces to its skip path.
    pub fn zero_body(&mut self) {
        for b in &self.spec.body {
            self.params.get_mut(&b.conv.weight_name()).fill(0.0);
            self.params.get_mut(&b.conv.bias_name()).fill(0.0);
            self.params.get_mut(&b.shift_name()).fill(0.0);
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        residual_fwd(&self.params, &self.spec, x.clone(), false).0
    }
}
