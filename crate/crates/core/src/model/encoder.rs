//! Pre-norm vision transformer with one or two prepended CLS tokens and
//! `g_id` / `g_head` projection heads, with explicit reverse-mode gradients.
//!
//! Token rows are laid out sample-major: row `b * T + t` holds token `t` of
//! sample `b`, CLS tokens first.

use ndarray::{s, Array1, Array2, Array4, ArrayView1, ArrayView2, ArrayView4, Axis};

use super::config::{EncoderConfig, Variant};
use super::params::{init_params, BlockSlots, Layout, Slot};
use crate::error::{Error, Result};
use crate::imaging::RgbImage;
use crate::real::Real;

pub const LN_EPS: f64 = 1e-6;
pub const NORM_EPS: f64 = 1e-12;

/// Projection head selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Id,
    HeadSim,
}

/// Unit-norm identity and head-similarity embeddings, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings<F> {
    pub z_id: Array2<F>,
    pub z_head: Array2<F>,
}

/// Records which branches an inference call touched.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EmbedTrace {
    pub head_projection_used: bool,
}

/// Converts images to a `(B, H, W, 3)` batch scaled to `[-1, 1]`.
pub fn images_to_batch<F: Real>(images: &[&RgbImage]) -> Result<Array4<F>> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidInput("empty image batch".into()))?;
    let (w, h) = (first.width, first.height);
    let mut out = Array4::<F>::zeros((images.len(), h, w, 3));
    for (b, img) in images.iter().enumerate() {
        if img.width != w || img.height != h {
            return Err(Error::ShapeMismatch("images in a batch must share a size".into()));
        }
        let flat = out.index_axis_mut(Axis(0), b);
        for (dst, &src) in flat.into_iter().zip(img.data.iter()) {
            *dst = F::of(src as f64 * 2.0 - 1.0);
        }
    }
    Ok(out)
}

struct LnCache<F> {
    xhat: Array2<F>,
    rstd: Array1<F>,
}

fn layer_norm<F: Real>(x: &Array2<F>, g: ArrayView1<F>, b: ArrayView1<F>) -> (Array2<F>, LnCache<F>) {
    let (n, d) = x.dim();
    let inv_d = F::one() / F::of(d as f64);
    let eps = F::of(LN_EPS);
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let g = g.to_vec();
    let b = b.to_vec();
    let mut xhat = vec![F::zero(); n * d];
    let mut rstd = Array1::<F>::zeros(n);
    let mut y = vec![F::zero(); n * d];
    for i in 0..n {
        let row = &xs[i * d..(i + 1) * d];
        let mean = row.iter().copied().sum::<F>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
        let r = F::one() / (var + eps).sqrt();
        rstd[i] = r;
        let xh_row = &mut xhat[i * d..(i + 1) * d];
        let y_row = &mut y[i * d..(i + 1) * d];
        for j in 0..d {
            let xh = (row[j] - mean) * r;
            xh_row[j] = xh;
            y_row[j] = xh * g[j] + b[j];
        }
    }
    let shape = (n, d);
    (
        Array2::from_shape_vec(shape, y).expect("shape"),
        LnCache {
            xhat: Array2::from_shape_vec(shape, xhat).expect("shape"),
            rstd,
        },
    )
}

/// Returns dx; accumulates dgamma/dbeta.
fn layer_norm_backward<F: Real>(
    dy: &Array2<F>,
    cache: &LnCache<F>,
    g: ArrayView1<F>,
    dg: &mut [F],
    db: &mut [F],
) -> Array2<F> {
    let (n, d) = dy.dim();
    let inv_d = F::one() / F::of(d as f64);
    let dy = dy.as_standard_layout();
    let dys = dy.as_slice().expect("standard layout");
    let xs = cache.xhat.as_slice().expect("standard layout");
    let g = g.to_vec();
    let mut dx = vec![F::zero(); n * d];
    for i in 0..n {
        let dy_row = &dys[i * d..(i + 1) * d];
        let xh_row = &xs[i * d..(i + 1) * d];
        let mut sum_dxh = F::zero();
        let mut sum_dxh_xh = F::zero();
        for j in 0..d {
            let dyij = dy_row[j];
            let xh = xh_row[j];
            dg[j] += dyij * xh;
            db[j] += dyij;
            let dxh = dyij * g[j];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh;
        }
        let r = cache.rstd[i];
        let a = sum_dxh * inv_d;
        let c = sum_dxh_xh * inv_d;
        let dx_row = &mut dx[i * d..(i + 1) * d];
        for j in 0..d {
            dx_row[j] = r * (dy_row[j] * g[j] - a - xh_row[j] * c);
        }
    }
    Array2::from_shape_vec((n, d), dx).expect("shape")
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// `tanh` through one `exp`; several times cheaper than the libm call.
#[inline]
fn fast_tanh<F: Real>(y: F) -> F {
    let two = F::of(2.0);
    F::one() - two / ((two * y).exp() + F::one())
}

/// Tanh-approximation GELU; returns the activation and the inner tanh, which
/// the backward pass reuses.
#[inline]
fn gelu<F: Real>(x: F) -> (F, F) {
    let c = F::of(GELU_C);
    let k = F::of(0.044715);
    let t = fast_tanh(c * (x + k * x * x * x));
    (F::of(0.5) * x * (F::one() + t), t)
}

#[inline]
fn gelu_grad<F: Real>(x: F, t: F) -> F {
    let c = F::of(GELU_C);
    let k = F::of(0.044715);
    let half = F::of(0.5);
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + F::of(3.0) * k * x * x)
}

fn affine<F: Real>(x: &Array2<F>, w: ArrayView2<F>, b: ArrayView1<F>) -> Array2<F> {
    let mut y = x.dot(&w);
    y += &b;
    y
}

fn add_into<F: Real>(dst: &mut [F], src: &Array2<F>) {
    for (d, &s) in dst.iter_mut().zip(src.iter()) {
        *d += s;
    }
}

fn add_col_sums<F: Real>(dst: &mut [F], src: &Array2<F>) {
    for row in src.rows() {
        for (d, &s) in dst.iter_mut().zip(row.iter()) {
            *d += s;
        }
    }
}

struct BlockCache<F> {
    ln1: LnCache<F>,
    a: Array2<F>,
    qkv: Array2<F>,
    probs: Vec<Array2<F>>,
    attn: Array2<F>,
    ln2: LnCache<F>,
    c: Array2<F>,
    u: Array2<F>,
    tanh: Array2<F>,
    g: Array2<F>,
}

struct ProjCache<F> {
    v: Array2<F>,
    z: Array2<F>,
    norms: Vec<F>,
}

/// Intermediate activations needed by [`Encoder::backward`].
pub struct ForwardCache<F> {
    batch: usize,
    patches: Array2<F>,
    blocks: Vec<BlockCache<F>>,
    lnf: LnCache<F>,
    lnf_out: Array2<F>,
    id: ProjCache<F>,
    head: Option<ProjCache<F>>,
}

impl<F: Real> ForwardCache<F> {
    pub fn batch(&self) -> usize {
        self.batch
    }
}

/// Transformer encoder with its parameters.
#[derive(Debug, Clone)]
pub struct Encoder<F> {
    config: EncoderConfig,
    layout: Layout,
    params: Vec<F>,
}

impl<F: Real> Encoder<F> {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let params = init_params(&layout, seed);
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn from_params(config: EncoderConfig, params: Vec<F>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(Error::ShapeMismatch(format!(
                "parameter vector has {} entries, layout needs {}",
                params.len(),
                layout.total
            )));
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[F] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [F] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    pub fn check_finite(&self) -> Result<()> {
        if let Some(i) = self.params.iter().position(|v| !v.is_finite()) {
            let name = self
                .layout
                .entries
                .iter()
                .find(|e| e.slot.range().contains(&i))
                .map(|e| e.name.as_str())
                .unwrap_or("?");
            return Err(Error::NonFinite(format!("parameter {name}[{i}]")));
        }
        Ok(())
    }

    fn check_input(&self, images: &ArrayView4<F>) -> Result<()> {
        let (_, h, w, c) = images.dim();
        let s = self.config.image_size;
        if h != s || w != s || c != 3 {
            return Err(Error::ShapeMismatch(format!(
                "images are {h}x{w}x{c}, encoder expects {s}x{s}x3"
            )));
        }
        Ok(())
    }

    fn patchify(&self, images: &ArrayView4<F>) -> Array2<F> {
        let b = images.dim().0;
        let p = self.config.patch_size;
        let g = self.config.grid();
        let n = self.config.num_patches();
        let mut out = Array2::<F>::zeros((b * n, self.config.patch_dim()));
        for bi in 0..b {
            for gy in 0..g {
                for gx in 0..g {
                    let mut row = out.row_mut(bi * n + gy * g + gx);
                    let mut k = 0;
                    for iy in 0..p {
                        for ix in 0..p {
                            for ch in 0..3 {
                                row[k] = images[[bi, gy * p + iy, gx * p + ix, ch]];
                                k += 1;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn embed_tokens(&self, patches: &Array2<F>, batch: usize) -> Array2<F> {
        let pr = &self.params;
        let l = &self.layout;
        let d = self.config.embed_dim;
        let n = self.config.num_patches();
        let ncls = self.config.variant.num_cls();
        let t = self.config.num_tokens();
        let e = affine(patches, l.patch_w.mat(pr), l.patch_b.vec(pr));
        let pos = l.pos.mat(pr);
        let cls = l.cls.mat(pr);
        let mut h = Array2::<F>::zeros((batch * t, d));
        for b in 0..batch {
            for c in 0..ncls {
                let mut row = h.row_mut(b * t + c);
                row.assign(&cls.row(c));
                row += &pos.row(c);
            }
            let mut dst = h.slice_mut(s![b * t + ncls..(b + 1) * t, ..]);
            dst.assign(&e.slice(s![b * n..(b + 1) * n, ..]));
            dst += &pos.slice(s![ncls.., ..]);
        }
        h
    }

    fn block_forward(&self, h: &Array2<F>, bs: &BlockSlots, batch: usize) -> (Array2<F>, BlockCache<F>) {
        let pr = &self.params;
        let d = self.config.embed_dim;
        let nh = self.config.num_heads;
        let dh = self.config.head_dim();
        let t = self.config.num_tokens();
        let scale = F::one() / F::of(dh as f64).sqrt();

        let (a, ln1) = layer_norm(h, bs.ln1_g.vec(pr), bs.ln1_b.vec(pr));
        let qkv = affine(&a, bs.qkv_w.mat(pr), bs.qkv_b.vec(pr));
        let mut attn = Array2::<F>::zeros((batch * t, d));
        let mut probs = Vec::with_capacity(batch * nh);
        for b in 0..batch {
            let rows = b * t..(b + 1) * t;
            for hd in 0..nh {
                let q = qkv.slice(s![rows.clone(), hd * dh..(hd + 1) * dh]);
                let k = qkv.slice(s![rows.clone(), d + hd * dh..d + (hd + 1) * dh]);
                let v = qkv.slice(s![rows.clone(), 2 * d + hd * dh..2 * d + (hd + 1) * dh]);
                let mut sc = q.dot(&k.t());
                for mut row in sc.rows_mut() {
                    let m = row.iter().fold(F::neg_infinity(), |acc, &x| acc.max(x * scale));
                    let mut z = F::zero();
                    for x in row.iter_mut() {
                        *x = (*x * scale - m).exp();
                        z += *x;
                    }
                    let inv = F::one() / z;
                    row.mapv_inplace(|x| x * inv);
                }
                attn.slice_mut(s![rows.clone(), hd * dh..(hd + 1) * dh])
                    .assign(&sc.dot(&v));
                probs.push(sc);
            }
        }
        let mut h_mid = affine(&attn, bs.out_w.mat(pr), bs.out_b.vec(pr));
        h_mid += h;
        let (c, ln2) = layer_norm(&h_mid, bs.ln2_g.vec(pr), bs.ln2_b.vec(pr));
        let u = affine(&c, bs.fc1_w.mat(pr), bs.fc1_b.vec(pr));
        let mut tanh = Array2::<F>::zeros(u.raw_dim());
        let mut g = Array2::<F>::zeros(u.raw_dim());
        ndarray::Zip::from(&mut g).and(&mut tanh).and(&u).for_each(|g, t, &x| {
            let (a, b) = gelu(x);
            *g = a;
            *t = b;
        });
        let mut out = affine(&g, bs.fc2_w.mat(pr), bs.fc2_b.vec(pr));
        out += &h_mid;
        (
            out,
            BlockCache {
                ln1,
                a,
                qkv,
                probs,
                attn,
                ln2,
                c,
                u,
                tanh,
                g,
            },
        )
    }

    /// Rows of the final token states that feed the projections:
    /// `(B * ncls, d)`, sample-major.
    fn gather_cls(&self, h: &Array2<F>, batch: usize) -> Array2<F> {
        let ncls = self.config.variant.num_cls();
        let t = self.config.num_tokens();
        let d = self.config.embed_dim;
        let mut out = Array2::<F>::zeros((batch * ncls, d));
        for b in 0..batch {
            for c in 0..ncls {
                out.row_mut(b * ncls + c).assign(&h.row(b * t + c));
            }
        }
        out
    }

    fn token_rows(&self, lnf_out: &Array2<F>, which: Head) -> Array2<F> {
        let ncls = self.config.variant.num_cls();
        let col = match (which, ncls) {
            (Head::HeadSim, 2) => 1,
            _ => 0,
        };
        let batch = lnf_out.nrows() / ncls;
        let mut out = Array2::<F>::zeros((batch, self.config.embed_dim));
        for b in 0..batch {
            out.row_mut(b).assign(&lnf_out.row(b * ncls + col));
        }
        out
    }

    fn proj_slots(&self, which: Head) -> (Slot, Slot) {
        match which {
            Head::Id => (self.layout.id_w, self.layout.id_b),
            Head::HeadSim => (
                self.layout.head_w.expect("variant has a head projection"),
                self.layout.head_b.expect("variant has a head projection"),
            ),
        }
    }

    fn project(&self, x: &Array2<F>, which: Head) -> ProjCache<F> {
        let (w, b) = self.proj_slots(which);
        let v = affine(x, w.mat(&self.params), b.vec(&self.params));
        let eps = F::of(NORM_EPS);
        let mut z = v.clone();
        let mut norms = Vec::with_capacity(v.nrows());
        for mut row in z.rows_mut() {
            let n = row.dot(&row).sqrt().max(eps);
            row.mapv_inplace(|x| x / n);
            norms.push(n);
        }
        ProjCache { v, z, norms }
    }

    /// Affine projection through `g_id` or `g_head` followed by
    /// `v / max(|v|, 1e-12)`.
    pub fn project_and_normalize(&self, token_state: ArrayView1<F>, which: Head) -> Result<Array1<F>> {
        if token_state.len() != self.config.embed_dim {
            return Err(Error::ShapeMismatch(format!(
                "token state has {} dims, expected {}",
                token_state.len(),
                self.config.embed_dim
            )));
        }
        if which == Head::HeadSim && !self.config.variant.has_head_projection() {
            return Err(Error::InvalidInput("shared variant has no g_head".into()));
        }
        let x = token_state.to_owned().insert_axis(Axis(0));
        Ok(self.project(&x, which).z.row(0).to_owned())
    }

    fn run(&self, images: &ArrayView4<F>, want_head: bool) -> Result<ForwardCache<F>> {
        self.check_input(images)?;
        let batch = images.dim().0;
        let patches = self.patchify(images);
        let mut h = self.embed_tokens(&patches, batch);
        let mut blocks = Vec::with_capacity(self.config.depth);
        for bs in &self.layout.blocks {
            let (next, cache) = self.block_forward(&h, bs, batch);
            blocks.push(cache);
            h = next;
        }
        let cls = self.gather_cls(&h, batch);
        let (lnf_out, lnf) = layer_norm(&cls, self.layout.lnf_g.vec(&self.params), self.layout.lnf_b.vec(&self.params));
        let id = self.project(&self.token_rows(&lnf_out, Head::Id), Head::Id);
        let head = if want_head && self.config.variant.has_head_projection() {
            Some(self.project(&self.token_rows(&lnf_out, Head::HeadSim), Head::HeadSim))
        } else {
            None
        };
        Ok(ForwardCache {
            batch,
            patches,
            blocks,
            lnf,
            lnf_out,
            id,
            head,
        })
    }

    /// Full forward pass producing both embeddings. Deterministic.
    pub fn encode(&self, images: ArrayView4<F>) -> Result<Embeddings<F>> {
        self.check_finite()?;
        let (emb, _) = self.forward_train(images)?;
        Ok(emb)
    }

    /// Inference path: identity embedding only; `g_head` is never evaluated.
    pub fn embed_identity(&self, images: ArrayView4<F>) -> Result<(Array2<F>, EmbedTrace)> {
        self.check_finite()?;
        let cache = self.run(&images, false)?;
        let trace = EmbedTrace {
            head_projection_used: cache.head.is_some(),
        };
        Ok((cache.id.z, trace))
    }

    /// Forward pass that keeps activations for [`Encoder::backward`].
    pub fn forward_train(&self, images: ArrayView4<F>) -> Result<(Embeddings<F>, ForwardCache<F>)> {
        let cache = self.run(&images, true)?;
        let z_id = cache.id.z.clone();
        let z_head = match &cache.head {
            Some(h) => h.z.clone(),
            None => z_id.clone(),
        };
        Ok((Embeddings { z_id, z_head }, cache))
    }

    fn project_backward(&self, pc: &ProjCache<F>, x: &Array2<F>, dz: ArrayView2<F>, which: Head, grads: &mut [F]) -> Array2<F> {
        let eps = F::of(NORM_EPS);
        let mut dv = dz.to_owned();
        for (i, mut row) in dv.rows_mut().into_iter().enumerate() {
            let n = pc.norms[i];
            let vn = pc.v.row(i).dot(&pc.v.row(i)).sqrt();
            if vn > eps {
                let z = pc.z.row(i);
                let zd = z.dot(&dz.row(i));
                for (r, &zj) in row.iter_mut().zip(z.iter()) {
                    *r = (*r - zj * zd) / n;
                }
            } else {
                row.mapv_inplace(|x| x / eps);
            }
        }
        let (w, b) = self.proj_slots(which);
        add_into(&mut grads[w.range()], &x.t().dot(&dv));
        add_col_sums(&mut grads[b.range()], &dv);
        dv.dot(&w.mat(&self.params).t())
    }

    /// Gradient of the loss with respect to every parameter, given the
    /// loss gradients with respect to `z_id` and `z_head`.
    ///
    /// For the shared variant `z_head` is `z_id`, so the two are summed.
    pub fn backward(&self, cache: &ForwardCache<F>, d_id: ArrayView2<F>, d_head: ArrayView2<F>) -> Result<Vec<F>> {
        let batch = cache.batch;
        let d = self.config.embed_dim;
        if d_id.dim() != (batch, d) || d_head.dim() != (batch, d) {
            return Err(Error::ShapeMismatch("embedding gradients must be (batch, embed_dim)".into()));
        }
        let pr = &self.params;
        let l = &self.layout;
        let mut grads = vec![F::zero(); l.total];
        let ncls = self.config.variant.num_cls();
        let t = self.config.num_tokens();
        let n = self.config.num_patches();

        // projections -> final-norm output rows
        let mut d_lnf = Array2::<F>::zeros((batch * ncls, d));
        let id_in = self.token_rows(&cache.lnf_out, Head::Id);
        let d_id_total = if self.config.variant == Variant::Shared {
            let mut s = d_id.to_owned();
            s += &d_head;
            s
        } else {
            d_id.to_owned()
        };
        let dx_id = self.project_backward(&cache.id, &id_in, d_id_total.view(), Head::Id, &mut grads);
        for b in 0..batch {
            let mut r = d_lnf.row_mut(b * ncls);
            r += &dx_id.row(b);
        }
        if let Some(hc) = &cache.head {
            let head_in = self.token_rows(&cache.lnf_out, Head::HeadSim);
            let dx_head = self.project_backward(hc, &head_in, d_head, Head::HeadSim, &mut grads);
            let col = if ncls == 2 { 1 } else { 0 };
            for b in 0..batch {
                let mut r = d_lnf.row_mut(b * ncls + col);
                r += &dx_head.row(b);
            }
        }
        let (g_lo, g_hi) = (l.lnf_g.range(), l.lnf_b.range());
        let mut dgf = vec![F::zero(); d];
        let mut dbf = vec![F::zero(); d];
        let d_cls = layer_norm_backward(&d_lnf, &cache.lnf, l.lnf_g.vec(pr), &mut dgf, &mut dbf);
        grads[g_lo].iter_mut().zip(&dgf).for_each(|(g, &v)| *g += v);
        grads[g_hi].iter_mut().zip(&dbf).for_each(|(g, &v)| *g += v);

        let mut dh = Array2::<F>::zeros((batch * t, d));
        for b in 0..batch {
            for c in 0..ncls {
                dh.row_mut(b * t + c).assign(&d_cls.row(b * ncls + c));
            }
        }

        for (bs, bc) in l.blocks.iter().zip(&cache.blocks).rev() {
            dh = self.block_backward(dh, bs, bc, batch, &mut grads);
        }

        // token embedding
        {
            let gpos = &mut grads[l.pos.range()];
            for b in 0..batch {
                for tk in 0..t {
                    let row = dh.row(b * t + tk);
                    for j in 0..d {
                        gpos[tk * d + j] += row[j];
                    }
                }
            }
        }
        {
            let gcls = &mut grads[l.cls.range()];
            for b in 0..batch {
                for c in 0..ncls {
                    let row = dh.row(b * t + c);
                    for j in 0..d {
                        gcls[c * d + j] += row[j];
                    }
                }
            }
        }
        let mut de = Array2::<F>::zeros((batch * n, d));
        for b in 0..batch {
            de.slice_mut(s![b * n..(b + 1) * n, ..])
                .assign(&dh.slice(s![b * t + ncls..(b + 1) * t, ..]));
        }
        add_into(&mut grads[l.patch_w.range()], &cache.patches.t().dot(&de));
        add_col_sums(&mut grads[l.patch_b.range()], &de);
        Ok(grads)
    }

    fn block_backward(&self, d_out: Array2<F>, bs: &BlockSlots, bc: &BlockCache<F>, batch: usize, grads: &mut [F]) -> Array2<F> {
        let pr = &self.params;
        let d = self.config.embed_dim;
        let nh = self.config.num_heads;
        let dh = self.config.head_dim();
        let t = self.config.num_tokens();
        let scale = F::one() / F::of(dh as f64).sqrt();

        // MLP branch
        add_into(&mut grads[bs.fc2_w.range()], &bc.g.t().dot(&d_out));
        add_col_sums(&mut grads[bs.fc2_b.range()], &d_out);
        let dg = d_out.dot(&bs.fc2_w.mat(pr).t());
        let du = ndarray::Zip::from(&dg)
            .and(&bc.u)
            .and(&bc.tanh)
            .map_collect(|&g, &u, &t| g * gelu_grad(u, t));
        add_into(&mut grads[bs.fc1_w.range()], &bc.c.t().dot(&du));
        add_col_sums(&mut grads[bs.fc1_b.range()], &du);
        let dc = du.dot(&bs.fc1_w.mat(pr).t());
        let mut dg2 = vec![F::zero(); d];
        let mut db2 = vec![F::zero(); d];
        let dmid_ln = layer_norm_backward(&dc, &bc.ln2, bs.ln2_g.vec(pr), &mut dg2, &mut db2);
        grads[bs.ln2_g.range()].iter_mut().zip(&dg2).for_each(|(g, &v)| *g += v);
        grads[bs.ln2_b.range()].iter_mut().zip(&db2).for_each(|(g, &v)| *g += v);
        let mut d_mid = d_out;
        d_mid += &dmid_ln;

        // attention branch
        add_into(&mut grads[bs.out_w.range()], &bc.attn.t().dot(&d_mid));
        add_col_sums(&mut grads[bs.out_b.range()], &d_mid);
        let d_attn = d_mid.dot(&bs.out_w.mat(pr).t());
        let mut d_qkv = Array2::<F>::zeros((batch * t, 3 * d));
        for b in 0..batch {
            let rows = b * t..(b + 1) * t;
            for hd in 0..nh {
                let p = &bc.probs[b * nh + hd];
                let q = bc.qkv.slice(s![rows.clone(), hd * dh..(hd + 1) * dh]);
                let k = bc.qkv.slice(s![rows.clone(), d + hd * dh..d + (hd + 1) * dh]);
                let v = bc.qkv.slice(s![rows.clone(), 2 * d + hd * dh..2 * d + (hd + 1) * dh]);
                let d_o = d_attn.slice(s![rows.clone(), hd * dh..(hd + 1) * dh]);
                let dv = p.t().dot(&d_o);
                let mut dp = d_o.dot(&v.t());
                for (mut dprow, prow) in dp.rows_mut().into_iter().zip(p.rows()) {
                    let dot = dprow.dot(&prow);
                    for (x, &pv) in dprow.iter_mut().zip(prow.iter()) {
                        *x = pv * (*x - dot) * scale;
                    }
                }
                let dq = dp.dot(&k);
                let dk = dp.t().dot(&q);
                d_qkv.slice_mut(s![rows.clone(), hd * dh..(hd + 1) * dh]).assign(&dq);
                d_qkv.slice_mut(s![rows.clone(), d + hd * dh..d + (hd + 1) * dh]).assign(&dk);
                d_qkv.slice_mut(s![rows.clone(), 2 * d + hd * dh..2 * d + (hd + 1) * dh]).assign(&dv);
            }
        }
        add_into(&mut grads[bs.qkv_w.range()], &bc.a.t().dot(&d_qkv));
        add_col_sums(&mut grads[bs.qkv_b.range()], &d_qkv);
        let da = d_qkv.dot(&bs.qkv_w.mat(pr).t());
        let mut dg1 = vec![F::zero(); d];
        let mut db1 = vec![F::zero(); d];
        let din_ln = layer_norm_backward(&da, &bc.ln1, bs.ln1_g.vec(pr), &mut dg1, &mut db1);
        grads[bs.ln1_g.range()].iter_mut().zip(&dg1).for_each(|(g, &v)| *g += v);
        grads[bs.ln1_b.range()].iter_mut().zip(&db1).for_each(|(g, &v)| *g += v);
        d_mid += &din_ln;
        d_mid
    }

    /// Norm of the `g_id` parameter gradient produced by `d_id` alone.
    pub fn id_projection_grad_norm(&self, cache: &ForwardCache<F>, d_id: ArrayView2<F>) -> F {
        let mut grads = vec![F::zero(); self.layout.total];
        let id_in = self.token_rows(&cache.lnf_out, Head::Id);
        self.project_backward(&cache.id, &id_in, d_id, Head::Id, &mut grads);
        let (w, b) = (self.layout.id_w, self.layout.id_b);
        grads[w.range()]
            .iter()
            .chain(grads[b.range()].iter())
            .map(|&g| g * g)
            .sum::<F>()
            .sqrt()
    }

    /// Converts the parameters to another precision.
    pub fn cast<G: Real>(&self) -> Encoder<G> {
        Encoder {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.iter().map(|v| G::of(v.f64())).collect(),
        }
    }
}
