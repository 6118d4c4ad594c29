//! Multi-scale deformable attention and the transformer encoder/decoder
//! built on it.
//!
//! Reference points are normalized to `[0, 1]^2`; on level `l` of extent
//! `H_l x W_l` a reference `(px, py)` sits at pixel `(px W_l - 0.5, py H_l - 0.5)`
//! and predicted offsets are added in that level's pixel units. Attention
//! weights are normalized jointly over all `L * K` samples of a head.

use std::f64::consts::PI;

use crate::error::{shape_err, Error, Result};
use crate::exec::Exec;
use crate::geometry::stencil;
use crate::layers::{LayerNorm, Linear, Mlp};
use crate::numeric::{Real, Tensor, Var};
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::posenc::{absolute_pe_tokens, EncodingConfig};

/// Spatial extents of the levels stacked in a token-major value tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LevelLayout {
    shapes: Vec<(usize, usize)>,
    starts: Vec<usize>,
    total: usize,
}

impl LevelLayout {
    pub fn new(shapes: Vec<(usize, usize)>) -> Self {
        let mut starts = Vec::with_capacity(shapes.len());
        let mut total = 0;
        for &(h, w) in &shapes {
            starts.push(total);
            total += h * w;
        }
        LevelLayout { shapes, starts, total }
    }

    pub fn single(h: usize, w: usize) -> Self {
        Self::new(vec![(h, w)])
    }

    pub fn shapes(&self) -> &[(usize, usize)] {
        &self.shapes
    }

    pub fn starts(&self) -> &[usize] {
        &self.starts
    }

    pub fn levels(&self) -> usize {
        self.shapes.len()
    }

    pub fn total(&self) -> usize {
        self.total
    }

    /// Normalized centre of every token's own cell, `[total, 2]`.
    pub fn reference_points(&self) -> Tensor {
        let mut out = Vec::with_capacity(self.total * 2);
        for &(h, w) in &self.shapes {
            for i in 0..h {
                for j in 0..w {
                    out.push((j as Real + 0.5) / w as Real);
                    out.push((i as Real + 0.5) / h as Real);
                }
            }
        }
        Tensor::new([self.total, 2], out).expect("reference layout")
    }

    /// Level index of every token.
    pub fn level_of_tokens(&self) -> Vec<usize> {
        self.shapes
            .iter()
            .enumerate()
            .flat_map(|(l, &(h, w))| std::iter::repeat_n(l, h * w))
            .collect()
    }
}

/// Sampling geometry of one fused deformable-attention call.
#[derive(Clone, Copy, Debug)]
pub struct SampleGeometry {
    pub heads: usize,
    pub points: usize,
}

/// Fused deformable sampling: for every query and head, bilinearly samples
/// `points` locations per level from that head's channel slice of `values`
/// and sums them with `weights`.
///
/// * `values`: `[total, d]` token-major, levels laid out per `layout`
/// * `reference`: `[Nq, 2]` normalized
/// * `offsets`: `[Nq, M * L * K * 2]`, ordered `(m, l, k, xy)`
/// * `weights`: `[Nq, M * L * K]`, ordered `(m, l, k)`
///
/// Returns `[Nq, d]` with head `m` in channels `[m d/M, (m+1) d/M)`.
pub fn ms_deform_sample<'t>(
    values: Var<'t>,
    layout: &LevelLayout,
    reference: Var<'t>,
    offsets: Var<'t>,
    weights: Var<'t>,
    geom: SampleGeometry,
) -> Result<Var<'t>> {
    let (vals, refs, offs, wts) = (values.value(), reference.value(), offsets.value(), weights.value());
    let SampleGeometry { heads: m, points: k } = geom;
    let l = layout.levels();
    let [total, d] = *vals.shape() else {
        return shape_err("ms_deform_sample", format!("values {:?} are not [T,d]", vals.shape()));
    };
    if total != layout.total() {
        return shape_err(
            "ms_deform_sample",
            format!("{total} value tokens, layout holds {}", layout.total()),
        );
    }
    if m == 0 || d % m != 0 {
        return shape_err("ms_deform_sample", format!("{d} channels over {m} heads"));
    }
    let [nq, 2] = *refs.shape() else {
        return shape_err(
            "ms_deform_sample",
            format!("reference {:?} is not [Nq,2]", refs.shape()),
        );
    };
    let samples = m * l * k;
    if offs.shape() != [nq, samples * 2] || wts.shape() != [nq, samples] {
        return shape_err(
            "ms_deform_sample",
            format!(
                "offsets {:?} / weights {:?} for {nq} queries, {m} heads, {l} levels, {k} points",
                offs.shape(),
                wts.shape()
            ),
        );
    }
    let dh = d / m;
    let layout = layout.clone();
    let exec = Exec::default().for_work(nq * samples * dh * 8);

    // Pixel location of sample (m, l, k) of query q.
    let location = move |refs: &[Real], offs: &[Real], layout: &LevelLayout, q: usize, s: usize, lvl: usize| {
        let (h, w) = layout.shapes[lvl];
        let x = refs[2 * q] * w as Real - 0.5 + offs[(q * samples + s) * 2];
        let y = refs[2 * q + 1] * h as Real - 0.5 + offs[(q * samples + s) * 2 + 1];
        (x, y)
    };

    let mut out = vec![0.0; nq * d];
    exec.for_rows(&mut out, d, |q, row| {
        for hd in 0..m {
            let acc = &mut row[hd * dh..(hd + 1) * dh];
            for lvl in 0..l {
                let (h, w) = layout.shapes[lvl];
                let start = layout.starts[lvl];
                for pt in 0..k {
                    let s = (hd * l + lvl) * k + pt;
                    let a = wts.data()[q * samples + s];
                    let (x, y) = location(refs.data(), offs.data(), &layout, q, s, lvl);
                    let st = stencil(h, w, x, y);
                    for (cell, cw) in st.idx.iter().zip(&st.w) {
                        let Some(cell) = cell else { continue };
                        let base = (start + cell) * d + hd * dh;
                        let aw = a * cw;
                        for (o, v) in acc.iter_mut().zip(&vals.data()[base..base + dh]) {
                            *o += aw * v;
                        }
                    }
                }
            }
        }
    });

    values.tape().push(
        "ms_deform_sample",
        Tensor::new([nq, d], out)?,
        &[values, reference, offsets, weights],
        move |g, needs| {
            // Per-query gradients for offsets and weights.
            let per_query = exec.map_range(nq, |q| {
                let mut doff = vec![0.0; samples * 2];
                let mut dw = vec![0.0; samples];
                let gq = &g[q * d..(q + 1) * d];
                for hd in 0..m {
                    let gh = &gq[hd * dh..(hd + 1) * dh];
                    for lvl in 0..l {
                        let (h, w) = layout.shapes[lvl];
                        let start = layout.starts[lvl];
                        for pt in 0..k {
                            let s = (hd * l + lvl) * k + pt;
                            let a = wts.data()[q * samples + s];
                            let (x, y) = location(refs.data(), offs.data(), &layout, q, s, lvl);
                            let st = stencil(h, w, x, y);
                            let (mut val_dot, mut dx, mut dy) = (0.0, 0.0, 0.0);
                            for c in 0..4 {
                                let Some(cell) = st.idx[c] else { continue };
                                let base = (start + cell) * d + hd * dh;
                                let gv: Real = gh.iter().zip(&vals.data()[base..base + dh]).map(|(g, v)| g * v).sum();
                                val_dot += st.w[c] * gv;
                                dx += st.dwdx[c] * gv;
                                dy += st.dwdy[c] * gv;
                            }
                            dw[s] = val_dot;
                            doff[2 * s] = a * dx;
                            doff[2 * s + 1] = a * dy;
                        }
                    }
                }
                (doff, dw)
            });

            let dvalues = needs[0].then(|| {
                let mut dv = vec![0.0; total * d];
                for q in 0..nq {
                    let gq = &g[q * d..(q + 1) * d];
                    for hd in 0..m {
                        let gh = &gq[hd * dh..(hd + 1) * dh];
                        for lvl in 0..l {
                            let (h, w) = layout.shapes[lvl];
                            let start = layout.starts[lvl];
                            for pt in 0..k {
                                let s = (hd * l + lvl) * k + pt;
                                let a = wts.data()[q * samples + s];
                                let (x, y) = location(refs.data(), offs.data(), &layout, q, s, lvl);
                                let st = stencil(h, w, x, y);
                                for (cell, cw) in st.idx.iter().zip(&st.w) {
                                    let Some(cell) = cell else { continue };
                                    let base = (start + cell) * d + hd * dh;
                                    let aw = a * cw;
                                    for (dst, gv) in dv[base..base + dh].iter_mut().zip(gh) {
                                        *dst += aw * gv;
                                    }
                                }
                            }
                        }
                    }
                }
                dv
            });

            let dref = needs[1].then(|| {
                let mut dr = vec![0.0; nq * 2];
                for (q, (doff, _)) in per_query.iter().enumerate() {
                    for hd in 0..m {
                        for lvl in 0..l {
                            let (h, w) = layout.shapes[lvl];
                            for pt in 0..k {
                                let s = (hd * l + lvl) * k + pt;
                                dr[2 * q] += doff[2 * s] * w as Real;
                                dr[2 * q + 1] += doff[2 * s + 1] * h as Real;
                            }
                        }
                    }
                }
                dr
            });
            let doffsets = needs[2].then(|| per_query.iter().flat_map(|(o, _)| o.iter().copied()).collect());
            let dweights = needs[3].then(|| per_query.iter().flat_map(|(_, w)| w.iter().copied()).collect());
            vec![dvalues, dref, doffsets, dweights]
        },
    )
}

/// Offset-bias pattern: head `m` points along angle `2 pi m / M`, sample `k`
/// at distance `k + 1`, repeated for every level. Layout `(m, l, k, xy)`.
pub fn radial_offset_bias(heads: usize, levels: usize, points: usize) -> Tensor {
    let mut out = Vec::with_capacity(heads * levels * points * 2);
    for m in 0..heads {
        let theta = 2.0 * PI * m as f64 / heads as f64;
        let (s, c) = theta.sin_cos();
        let norm = c.abs().max(s.abs());
        for _ in 0..levels {
            for k in 0..points {
                out.push((c / norm * (k + 1) as f64) as Real);
                out.push((s / norm * (k + 1) as f64) as Real);
            }
        }
    }
    Tensor::new([heads * levels * points * 2], out).expect("offset bias layout")
}

/// Deformable attention weights: offset, attention-weight, value and output
/// projections.
#[derive(Clone, Debug)]
pub struct DeformAttn {
    pub offset_proj: Linear,
    pub weight_proj: Linear,
    pub value_proj: Linear,
    pub output_proj: Linear,
    pub heads: usize,
    pub levels: usize,
    pub points: usize,
}

impl DeformAttn {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        d: usize,
        heads: usize,
        levels: usize,
        points: usize,
    ) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!("width {d} is not divisible by {heads} heads")));
        }
        let samples = heads * levels * points;
        Ok(DeformAttn {
            offset_proj: Linear::from_tensors(
                store,
                &format!("{name}.offset"),
                Tensor::zeros([samples * 2, d]),
                radial_offset_bias(heads, levels, points),
            ),
            weight_proj: Linear::zeros(store, &format!("{name}.attn_weight"), d, samples),
            value_proj: Linear::new(store, init, &format!("{name}.value"), d, d),
            output_proj: Linear::new(store, init, &format!("{name}.output"), d, d),
            heads,
            levels,
            points,
        })
    }

    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        query: Var<'t>,
        reference: Var<'t>,
        value_input: Var<'t>,
        layout: &LevelLayout,
        site: &str,
    ) -> Result<Var<'t>> {
        if layout.levels() != self.levels {
            return shape_err(
                "deform_attn",
                format!("{} levels, weights for {}", layout.levels(), self.levels),
            );
        }
        let nq = query.shape()[0];
        let lk = self.levels * self.points;
        let value = self.value_proj.forward(p, value_input)?;
        let offsets = self.offset_proj.forward(p, query)?;
        let weights = self
            .weight_proj
            .forward(p, query)?
            .reshape([nq * self.heads, lk])?
            .softmax(1)?;
        p.record(site, &weights);
        let weights = weights.reshape([nq, self.heads * lk])?;
        let sampled = ms_deform_sample(
            value,
            layout,
            reference,
            offsets,
            weights,
            SampleGeometry {
                heads: self.heads,
                points: self.points,
            },
        )?;
        self.output_proj.forward(p, sampled)
    }
}

/// Standard scaled dot-product multi-head attention among queries.
#[derive(Clone, Debug)]
pub struct MultiHeadSelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadSelfAttention {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!("width {d} is not divisible by {heads} heads")));
        }
        Ok(MultiHeadSelfAttention {
            q: Linear::new(store, init, &format!("{name}.q"), d, d),
            k: Linear::new(store, init, &format!("{name}.k"), d, d),
            v: Linear::new(store, init, &format!("{name}.v"), d, d),
            out: Linear::new(store, init, &format!("{name}.out"), d, d),
            heads,
        })
    }

    /// Queries and keys come from `qk_input`, values from `v_input`.
    pub fn forward<'t>(&self, p: &Bound<'t>, qk_input: Var<'t>, v_input: Var<'t>, site: &str) -> Result<Var<'t>> {
        let d = qk_input.shape()[1];
        let dh = d / self.heads;
        let scale = 1.0 / (dh as Real).sqrt();
        let q = self.q.forward(p, qk_input)?;
        let k = self.k.forward(p, qk_input)?;
        let v = self.v.forward(p, v_input)?;
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.narrow(1, h * dh, dh)?;
            let kh = k.narrow(1, h * dh, dh)?;
            let vh = v.narrow(1, h * dh, dh)?;
            let attn = qh.matmul(kh.t()?)?.scale(scale)?.softmax(1)?;
            p.record(site, &attn);
            heads.push(attn.matmul(vh)?);
        }
        self.out.forward(p, Var::concat(&heads, 1)?)
    }
}

fn feed_forward(store: &mut ParamStore, init: &mut Init, name: &str, d: usize, hidden: usize) -> Mlp {
    Mlp::new(store, init, name, &[d, hidden, d])
}

/// Pre-norm encoder layer: `x + attn(LN x)`, then `x + FFN(LN x)`.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub norm1: LayerNorm,
    pub attn: DeformAttn,
    pub norm2: LayerNorm,
    pub ffn: Mlp,
}

impl EncoderLayer {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        d: usize,
        ffn: usize,
        heads: usize,
        levels: usize,
        points: usize,
    ) -> Result<Self> {
        Ok(EncoderLayer {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
            attn: DeformAttn::new(store, init, &format!("{name}.attn"), d, heads, levels, points)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
            ffn: feed_forward(store, init, &format!("{name}.ffn"), d, ffn),
        })
    }

    /// `x`, `pos`: `[T, d]`; `reference`: `[T, 2]` (each token's own cell).
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        x: Var<'t>,
        pos: Var<'t>,
        reference: Var<'t>,
        layout: &LevelLayout,
        site: &str,
    ) -> Result<Var<'t>> {
        let h = self.norm1.forward(p, x)?;
        let attn = self.attn.forward(p, h.add(pos)?, reference, h, layout, site)?;
        let x = x.add(attn)?;
        let h = self.norm2.forward(p, x)?;
        x.add(self.ffn.forward(p, h)?)
    }
}

/// Positional input of every memory token: sinusoidal encoding on its own
/// level grid plus a learned per-level embedding.
pub fn memory_positions<'t>(
    p: &Bound<'t>,
    layout: &LevelLayout,
    level_embed: ParamId,
    pe: &EncodingConfig,
) -> Result<Var<'t>> {
    let d = pe.d_model();
    let mut data = Vec::with_capacity(layout.total() * d);
    for &(h, w) in layout.shapes() {
        data.extend_from_slice(absolute_pe_tokens(h, w, pe)?.data());
    }
    let sinusoid = p.tape().constant(Tensor::new([layout.total(), d], data)?);
    let embed = p.var(level_embed).gather_rows(&layout.level_of_tokens())?;
    sinusoid.add(embed)
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub layers: Vec<EncoderLayer>,
    pub level_embed: ParamId,
}

impl Encoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        num_layers: usize,
        d: usize,
        ffn: usize,
        heads: usize,
        levels: usize,
        points: usize,
    ) -> Result<Self> {
        let layers = (0..num_layers)
            .map(|i| EncoderLayer::new(store, init, &format!("encoder.{i}"), d, ffn, heads, levels, points))
            .collect::<Result<_>>()?;
        let level_embed = store.add("encoder.level_embed", init.uniform([levels, d], 0.1));
        Ok(Encoder { layers, level_embed })
    }

    /// Refines flattened pyramid tokens `[T, d]`.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        tokens: Var<'t>,
        layout: &LevelLayout,
        pe: &EncodingConfig,
    ) -> Result<Var<'t>> {
        let pos = memory_positions(p, layout, self.level_embed, pe)?;
        let reference = p.tape().constant(layout.reference_points());
        let mut x = tokens;
        for layer in &self.layers {
            x = layer.forward(p, x, pos, reference, layout, "encoder")?;
        }
        Ok(x)
    }
}

/// Pre-norm decoder layer: self-attention, deformable cross-attention, FFN.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub norm1: LayerNorm,
    pub self_attn: MultiHeadSelfAttention,
    pub norm2: LayerNorm,
    pub cross_attn: DeformAttn,
    pub norm3: LayerNorm,
    pub ffn: Mlp,
}

impl DecoderLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        d: usize,
        ffn: usize,
        heads: usize,
        levels: usize,
        points: usize,
    ) -> Result<Self> {
        Ok(DecoderLayer {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
            self_attn: MultiHeadSelfAttention::new(store, init, &format!("{name}.self_attn"), d, heads)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
            cross_attn: DeformAttn::new(store, init, &format!("{name}.cross_attn"), d, heads, levels, points)?,
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), d),
            ffn: feed_forward(store, init, &format!("{name}.ffn"), d, ffn),
        })
    }

    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        x: Var<'t>,
        query_pos: Var<'t>,
        reference: Var<'t>,
        memory: Var<'t>,
        layout: &LevelLayout,
    ) -> Result<Var<'t>> {
        let h = self.norm1.forward(p, x)?;
        let x = x.add(self.self_attn.forward(p, h.add(query_pos)?, h, "decoder.self")?)?;
        let h = self.norm2.forward(p, x)?;
        let cross = self
            .cross_attn
            .forward(p, h.add(query_pos)?, reference, memory, layout, "decoder.cross")?;
        let x = x.add(cross)?;
        let h = self.norm3.forward(p, x)?;
        x.add(self.ffn.forward(p, h)?)
    }
}

/// Query embeddings after every decoder stage.
pub struct DecoderOutput<'t> {
    /// One `[N, d]` tensor per stage, after the shared output norm.
    pub stages: Vec<Var<'t>>,
    /// `[N, 2]` normalized reference points.
    pub reference: Var<'t>,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub query_content: ParamId,
    pub query_pos: ParamId,
    pub ref_proj: Linear,
    pub layers: Vec<DecoderLayer>,
    pub norm: LayerNorm,
}

impl Decoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        num_layers: usize,
        num_queries: usize,
        d: usize,
        ffn: usize,
        heads: usize,
        levels: usize,
        points: usize,
    ) -> Result<Self> {
        if num_queries == 0 {
            return Err(Error::Config("at least one object query is required".into()));
        }
        let query_content = store.add("decoder.query_content", init.uniform([num_queries, d], 1.0));
        let query_pos = store.add("decoder.query_pos", init.uniform([num_queries, d], 1.0));
        let ref_proj = Linear::new(store, init, "decoder.reference", d, 2);
        let layers = (0..num_layers)
            .map(|i| DecoderLayer::new(store, init, &format!("decoder.{i}"), d, ffn, heads, levels, points))
            .collect::<Result<_>>()?;
        Ok(Decoder {
            query_content,
            query_pos,
            ref_proj,
            layers,
            norm: LayerNorm::new(store, "decoder.norm", d),
        })
    }

    pub fn decoder_stack<'t>(&self, p: &Bound<'t>, memory: Var<'t>, layout: &LevelLayout) -> Result<DecoderOutput<'t>> {
        let query_pos = p.var(self.query_pos);
        let reference = self.ref_proj.forward(p, query_pos)?.sigmoid()?;
        let mut x = p.var(self.query_content);
        let mut stages = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            x = layer.forward(p, x, query_pos, reference, memory, layout)?;
            stages.push(self.norm.forward(p, x)?);
        }
        Ok(DecoderOutput { stages, reference })
    }
}
