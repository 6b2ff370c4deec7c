//! Independent reference implementations shared by the integration tests.
//! Everything here is written with plain loops and avoids the library's
//! kernels so that agreement means something.

#![allow(dead_code)]

use octseg::eval::DetectionRecord;
use octseg::io::{Grid, LabelMask};
use octseg::net::spec::{AsppSpec, ConvBlockSpec, ConvSpec, Skip, StageBlock, UpsampleSpec};
use octseg::net::{Network, Parameters, Tensor};
use octseg::plan::PlanConfig;
use rand::Rng;

pub fn toy_plan(pools: [usize; 3], patch: [usize; 3], base: usize) -> PlanConfig {
    PlanConfig {
        target_spacing: [1.0; 3],
        patch_size: patch,
        batch_size: 2,
        pools_per_axis: pools,
        base_features: base,
        max_features: 4 * base,
        dimensionality: 3,
    }
}

pub fn random_tensor<R: Rng>(rng: &mut R, batch: usize, channels: usize, dims: [usize; 3]) -> Tensor {
    let n = batch * channels * dims.iter().product::<usize>();
    Tensor::from_vec(batch, channels, dims, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

pub fn random_mask<R: Rng>(rng: &mut R, dims: [usize; 3], classes: u8) -> LabelMask {
    let g = Grid::from_fn(dims, |_, _, _| rng.gen_range(0..classes)).unwrap();
    LabelMask::new(g, [1.0; 3]).unwrap()
}

// ------------------------------------------------------------ network

fn at(t: &Tensor, n: usize, c: usize, x: usize, y: usize, z: usize) -> f64 {
    let [dx, dy, dz] = t.dims;
    t.data[(((n * t.channels + c) * dz + z) * dy + y) * dx + x]
}

/// Direct convolution: out[co] = b[co] + sum over ci and taps.
pub fn naive_conv(p: &Parameters, c: &ConvSpec, x: &Tensor) -> Tensor {
    let w = p.get(&c.weight_name());
    let b = p.get(&c.bias_name());
    let [kx, ky, kz] = c.kernel;
    let pad: Vec<i64> = (0..3).map(|a| (c.dilation[a] * (c.kernel[a] - 1) / 2) as i64).collect();
    let out_dims: [usize; 3] = std::array::from_fn(|a| {
        let span = c.dilation[a] * (c.kernel[a] - 1) + 1;
        (x.dims[a] + 2 * pad[a] as usize - span) / c.stride[a] + 1
    });
    let mut out = Tensor::zeros(x.batch, c.out_channels, out_dims);
    let [ox, oy, oz] = out_dims;
    let mut i = 0;
    for n in 0..x.batch {
        for co in 0..c.out_channels {
            for z in 0..oz {
                for y in 0..oy {
                    for xx in 0..ox {
                        let mut acc = b[co];
                        for ci in 0..c.in_channels {
                            for tz in 0..kz {
                                for ty in 0..ky {
                                    for tx in 0..kx {
                                        let sx = (xx * c.stride[0] + tx * c.dilation[0]) as i64 - pad[0];
                                        let sy = (y * c.stride[1] + ty * c.dilation[1]) as i64 - pad[1];
                                        let sz = (z * c.stride[2] + tz * c.dilation[2]) as i64 - pad[2];
                                        if sx < 0
                                            || sy < 0
                                            || sz < 0
                                            || sx >= x.dims[0] as i64
                                            || sy >= x.dims[1] as i64
                                            || sz >= x.dims[2] as i64
                                        {
                                            continue;
                                        }
                                        let wi = (((co * c.in_channels + ci) * kz + tz) * ky + ty) * kx + tx;
                                        acc += w[wi] * at(x, n, ci, sx as usize, sy as usize, sz as usize);
                                    }
                                }
                            }
                        }
                        out.data[i] = acc;
                        i += 1;
                    }
                }
            }
        }
    }
    out
}

/// Transposed convolution with kernel equal to stride (no overlap).
pub fn naive_upsample(p: &Parameters, u: &UpsampleSpec, x: &Tensor) -> Tensor {
    let w = p.get(&u.weight_name());
    let b = p.get(&u.bias_name());
    let [sx, sy, sz] = u.stride;
    let od = [x.dims[0] * sx, x.dims[1] * sy, x.dims[2] * sz];
    let mut out = Tensor::zeros(x.batch, u.out_channels, od);
    let mut i = 0;
    for n in 0..x.batch {
        for co in 0..u.out_channels {
            for z in 0..od[2] {
                for y in 0..od[1] {
                    for xx in 0..od[0] {
                        let (ix, tx) = (xx / sx, xx % sx);
                        let (iy, ty) = (y / sy, y % sy);
                        let (iz, tz) = (z / sz, z % sz);
                        let mut acc = b[co];
                        for ci in 0..u.in_channels {
                            let wi = (((ci * u.out_channels + co) * sz + tz) * sy + ty) * sx + tx;
                            acc += w[wi] * at(x, n, ci, ix, iy, iz);
                        }
                        out.data[i] = acc;
                        i += 1;
                    }
                }
            }
        }
    }
    out
}

pub fn naive_block(p: &Parameters, b: &ConvBlockSpec, x: &Tensor) -> Tensor {
    let mut y = naive_conv(p, &b.conv, x);
    let scale = p.get(&b.scale_name());
    let shift = p.get(&b.shift_name());
    let s = y.spatial();
    for n in 0..y.batch {
        for c in 0..y.channels {
            let base = (n * y.channels + c) * s;
            let v = &mut y.data[base..base + s];
            let mean = v.iter().sum::<f64>() / s as f64;
            let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / s as f64;
            for a in v.iter_mut() {
                let h = scale[c] * (*a - mean) / (var + 1e-5).sqrt() + shift[c];
                *a = if h > 0.0 { h } else { 0.01 * h };
            }
        }
    }
    y
}

fn concat(a: &Tensor, b: &Tensor) -> Tensor {
    let s = a.spatial();
    let mut data = Vec::new();
    for n in 0..a.batch {
        data.extend_from_slice(&a.data[n * a.channels * s..(n + 1) * a.channels * s]);
        data.extend_from_slice(&b.data[n * b.channels * s..(n + 1) * b.channels * s]);
    }
    Tensor::from_vec(a.batch, a.channels + b.channels, a.dims, data)
}

pub fn naive_stage(p: &Parameters, st: &StageBlock, x: &Tensor) -> Tensor {
    match st {
        StageBlock::Plain(blocks) => blocks.iter().fold(x.clone(), |h, b| naive_block(p, b, &h)),
        StageBlock::Residual(r) => {
            let body = r.body.iter().fold(x.clone(), |h, b| naive_block(p, b, &h));
            let skip = match &r.skip {
                Skip::Identity => x.clone(),
                Skip::Projection(c) => naive_conv(p, c, x),
            };
            let data = body.data.iter().zip(&skip.data).map(|(a, b)| a + b).collect();
            Tensor::from_vec(body.batch, body.channels, body.dims, data)
        }
    }
}

fn naive_aspp(p: &Parameters, a: &AsppSpec, x: &Tensor) -> Tensor {
    let mut cat: Option<Tensor> = None;
    for b in &a.branches {
        let y = naive_block(p, b, x);
        cat = Some(match cat {
            None => y,
            Some(c) => concat(&c, &y),
        });
    }
    naive_block(p, &a.fuse, &cat.unwrap())
}

/// Whole-network logits computed with direct loops.
pub fn naive_forward(net: &Network, x: &Tensor) -> Tensor {
    let s = &net.spec;
    let p = &net.params;
    let mut h = x.clone();
    if let Some(b) = &s.stem {
        h = naive_block(p, b, &h);
    }
    if let Some(a) = &s.aspp {
        h = naive_aspp(p, a, &h);
    }
    let mut skips = Vec::new();
    for st in &s.encoder {
        h = naive_stage(p, st, &h);
        skips.push(h.clone());
    }
    if let Some(st) = &s.bottleneck {
        h = naive_stage(p, st, &h);
    }
    for d in &s.decoder {
        let up = naive_upsample(p, &d.upsample, &h);
        h = naive_stage(p, &d.block, &concat(&up, &skips[d.level]));
    }
    if let Some(c) = &s.head {
        h = naive_conv(p, c, &h);
    }
    h
}

// --------------------------------------------------------------- loss

/// Cross-entropy plus (1 - mean foreground soft-Dice), voxel by voxel.
pub fn scalar_loss(probs: &Tensor, target: &[u8]) -> (f64, f64) {
    let s = probs.spatial();
    let k = probs.channels;
    let mut ce = 0.0;
    let mut inter = vec![0.0; k];
    let mut psum = vec![0.0; k];
    let mut tsum = vec![0.0; k];
    for n in 0..probs.batch {
        for v in 0..s {
            let t = target[n * s + v] as usize;
            for c in 0..k {
                let pv = probs.data[(n * k + c) * s + v];
                psum[c] += pv;
                if c == t {
                    inter[c] += pv;
                    tsum[c] += 1.0;
                    ce -= pv.max(1e-12).ln();
                }
            }
        }
    }
    ce /= (probs.batch * s) as f64;
    let mut dice = 0.0;
    for c in 1..k {
        dice += (2.0 * inter[c] + 1e-5) / (psum[c] + tsum[c] + 1e-5);
    }
    dice /= (k - 1) as f64;
    (ce + 1.0 - dice, ce)
}

pub fn random_probs<R: Rng>(rng: &mut R, batch: usize, classes: usize, dims: [usize; 3]) -> Tensor {
    let s: usize = dims.iter().product();
    let mut t = Tensor::zeros(batch, classes, dims);
    for n in 0..batch {
        for v in 0..s {
            let raw: Vec<f64> = (0..classes).map(|_| rng.gen_range(0.01..1.0)).collect();
            let z: f64 = raw.iter().sum();
            for c in 0..classes {
                t.data[(n * classes + c) * s + v] = raw[c] / z;
            }
        }
    }
    t
}

// ------------------------------------------------------------ metrics

pub fn brute_dice(pred: &LabelMask, gt: &LabelMask, c: u8) -> f64 {
    let mut x = 0i64;
    let mut y = 0i64;
    let mut both = 0i64;
    for i in 0..pred.labels.len() {
        let a = pred.labels.as_slice()[i] == c;
        let b = gt.labels.as_slice()[i] == c;
        if a {
            x += 1;
        }
        if b {
            y += 1;
        }
        if a && b {
            both += 1;
        }
    }
    if x + y == 0 {
        1.0
    } else {
        2.0 * both as f64 / (x + y) as f64
    }
}

pub fn brute_avd(pred: &LabelMask, gt: &LabelMask, c: u8, spacing: [f64; 3]) -> f64 {
    let mut diff = 0i64;
    for i in 0..pred.labels.len() {
        if pred.labels.as_slice()[i] == c {
            diff += 1;
        }
        if gt.labels.as_slice()[i] == c {
            diff -= 1;
        }
    }
    diff.abs() as f64 * spacing[0] * spacing[1] * spacing[2]
}

/// Probability that a random positive outranks a random negative (ties 1/2).
pub fn concordance_auc(records: &[DetectionRecord]) -> f64 {
    let mut num = 0.0;
    let mut pairs = 0.0;
    for p in records.iter().filter(|r| r.truth) {
        for n in records.iter().filter(|r| !r.truth) {
            pairs += 1.0;
            if p.score > n.score {
                num += 1.0;
            } else if p.score == n.score {
                num += 0.5;
            }
        }
    }
    num / pairs
}

pub fn random_records<R: Rng>(rng: &mut R, n: usize) -> Vec<DetectionRecord> {
    // coarse scores so ties are common
    let coarse = rng.gen_bool(0.5);
    (0..n)
        .map(|i| DetectionRecord {
            volume: format!("v{i}"),
            class: 1,
            score: if coarse {
                rng.gen_range(0..6) as f64 / 5.0
            } else {
                rng.gen_range(-1.0..1.0)
            },
            truth: i == 0 || (i > 1 && rng.gen_bool(0.5)),
        })
        .collect()
}

/// Percentile by full sort and linear interpolation between closest ranks.
pub fn sorted_percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = q / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (rank - lo as f64)
}

/// Connected components by recursive-free flood fill with an explicit
/// stack; returns sizes sorted descending.
pub fn flood_fill_sizes(labels: &Grid<u8>, class: u8) -> Vec<usize> {
    let [dx, dy, dz] = labels.dims();
    let mut seen = vec![false; labels.len()];
    let mut sizes = Vec::new();
    for z in 0..dz {
        for y in 0..dy {
            for x in 0..dx {
                let i = labels.index(x, y, z);
                if seen[i] || labels.get(x, y, z) != class {
                    continue;
                }
                let mut stack = vec![(x, y, z)];
                seen[i] = true;
                let mut size = 0;
                while let Some((a, b, c)) = stack.pop() {
                    size += 1;
                    for nz in c.saturating_sub(1)..=(c + 1).min(dz - 1) {
                        for ny in b.saturating_sub(1)..=(b + 1).min(dy - 1) {
                            for nx in a.saturating_sub(1)..=(a + 1).min(dx - 1) {
                                let j = labels.index(nx, ny, nz);
                                if !seen[j] && labels.get(nx, ny, nz) == class {
                                    seen[j] = true;
                                    stack.push((nx, ny, nz));
                                }
                            }
                        }
                    }
                }
                sizes.push(size);
            }
        }
    }
    sizes.sort_unstable_by(|a, b| b.cmp(a));
    sizes
}
