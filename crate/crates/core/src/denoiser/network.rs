use ndarray::{s, Array2, Zip};

use super::{column_sums, Conditioning, DenoiserConfig, DenoiserParams};
use crate::error::{ensure, Result};
use crate::image::Image;
use crate::params::ParamTable;

/// A batch of network inputs in image layout (`B x D`, one row per image).
#[derive(Clone, Debug)]
pub struct BatchInput {
    pub x: Array2<f64>,
    pub lowres: Option<Array2<f64>>,
    pub log_snr: Vec<f64>,
    pub tokens: Vec<Vec<u32>>,
    pub null: Vec<bool>,
}

impl BatchInput {
    pub fn from_images(
        config: &DenoiserConfig,
        xs: &[&Image],
        log_snr: &[f64],
        conds: &[&Conditioning],
    ) -> Result<Self> {
        ensure!(
            xs.len() == log_snr.len() && xs.len() == conds.len(),
            Shape,
            "batch of {} images, {} log-SNRs, {} conditions",
            xs.len(),
            log_snr.len(),
            conds.len()
        );
        let shape = config.image_shape();
        let d = shape.len();
        let b = xs.len();
        let mut x = Array2::zeros((b, d));
        let mut lowres = config.is_super_resolution().then(|| Array2::zeros((b, d)));
        for (i, (img, cond)) in xs.iter().zip(conds).enumerate() {
            ensure!(
                img.shape() == shape,
                Shape,
                "input {} for a {shape} stage",
                img.shape()
            );
            x.row_mut(i).assign(&ndarray::ArrayView1::from(img.data()));
            if let Some(lr) = &mut lowres {
                let Some(low) = &cond.lowres else {
                    return Err(crate::error::Error::InvalidArgument(
                        "super-resolution stage needs a low-resolution input".into(),
                    ));
                };
                ensure!(
                    low.shape() == shape,
                    Shape,
                    "low-resolution input {} for a {shape} stage",
                    low.shape()
                );
                lr.row_mut(i).assign(&ndarray::ArrayView1::from(low.data()));
            }
        }
        Ok(Self {
            x,
            lowres,
            log_snr: log_snr.to_vec(),
            tokens: conds.iter().map(|c| c.tokens.clone()).collect(),
            null: conds.iter().map(|c| c.null).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Intermediates kept for the reverse pass.
pub struct ForwardCache {
    batch: usize,
    tiles: usize,
    z: Array2<f64>,
    cond_active: Vec<bool>,
    tokens: Vec<Vec<u32>>,
    weights: Vec<Array2<f64>>,
    /// Input of every layer (hidden and head), tile rows.
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    modulated: Vec<Array2<f64>>,
    film_scale: Vec<Array2<f64>>,
    /// Template pre-activations, hidden values and outputs.
    template: Option<(Array2<f64>, Array2<f64>, Array2<f64>)>,
    skip: Vec<SkipRow>,
}

/// Per-image intermediates of the skip path.
struct SkipRow {
    alpha: f64,
    /// `x_t - alpha * m` and its per-pixel grey level.
    r: ndarray::Array1<f64>,
    grey: Vec<f64>,
    /// Grey and chroma gains per pixel and their slopes in the log-variance.
    gains: Vec<(f64, f64)>,
    slopes: Vec<(f64, f64)>,
}

/// `tile_map[k * tile_out + j]` is the image-layout index of element `j` of tile `k`.
fn tile_map(c: &DenoiserConfig) -> Vec<usize> {
    let per_side = c.tiles_per_side();
    let mut map = Vec::with_capacity(c.tiles() * c.tile_out());
    for ty in 0..per_side {
        for tx in 0..per_side {
            for dy in 0..c.tile {
                for dx in 0..c.tile {
                    let (y, x) = (ty * c.tile + dy, tx * c.tile + dx);
                    for ch in 0..c.channels {
                        map.push((y * c.resolution + x) * c.channels + ch);
                    }
                }
            }
        }
    }
    map
}

/// Native low-resolution pixels around tile `k`, borders replicated. The
/// input is the nearest-neighbour upsampling, so every other pixel is read.
fn lowres_window(c: &DenoiserConfig, lr: ndarray::ArrayView1<f64>, k: usize, out: &mut [f64]) {
    let per_side = c.tiles_per_side();
    let (ty, tx) = (k / per_side, k % per_side);
    let low_side = (c.resolution / 2) as isize;
    let halo = c.lowres_halo as isize;
    let w = c.lowres_window();
    let (y0, x0) = (
        (ty * c.tile / 2) as isize - halo,
        (tx * c.tile / 2) as isize - halo,
    );
    let mut n = 0;
    for dy in 0..w as isize {
        let py = (y0 + dy).clamp(0, low_side - 1) as usize;
        for dx in 0..w as isize {
            let px = (x0 + dx).clamp(0, low_side - 1) as usize;
            let base = (2 * py * c.resolution + 2 * px) * c.channels;
            for ch in 0..c.channels {
                out[n] = lr[base + ch];
                n += 1;
            }
        }
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn silu(v: f64) -> f64 {
    v * sigmoid(v)
}

fn silu_grad(v: f64) -> f64 {
    let s = sigmoid(v);
    s * (1.0 + v * (1.0 - s))
}

/// Gain `sigma / (alpha^2 v + sigma^2)` for log-variance `log_v`, and its
/// derivative in `log_v` (zero where the log-variance is clamped).
fn gain_and_slope(log_v: f64, alpha2: f64, sigma2: f64) -> (f64, f64) {
    let clamped = log_v.clamp(-LOG_VAR_LIMIT, LOG_VAR_LIMIT);
    let v = clamped.exp();
    let den = alpha2 * v + sigma2;
    let k = sigma2.sqrt() / den;
    let slope = if clamped == log_v {
        -k * alpha2 * v / den
    } else {
        0.0
    };
    (k, slope)
}

const LOG_VAR_LIMIT: f64 = 30.0;

fn repeat_rows(m: &Array2<f64>, times: usize) -> Array2<f64> {
    if times == 1 {
        return m.clone();
    }
    let (r, c) = m.dim();
    let mut out = Array2::zeros((r * times, c));
    for i in 0..r {
        for k in 0..times {
            out.row_mut(i * times + k).assign(&m.row(i));
        }
    }
    out
}

fn sum_row_groups(m: &Array2<f64>, times: usize) -> Array2<f64> {
    if times == 1 {
        return m.clone();
    }
    let (r, c) = m.dim();
    let mut out = Array2::zeros((r / times, c));
    for i in 0..r {
        let mut dst = out.row_mut(i / times);
        dst += &m.row(i);
    }
    out
}

/// Sinusoidal embedding of the LogSNR, frequencies geometric in `[0.05, 4]`.
pub(crate) fn time_embedding(log_snr: f64, freqs: usize, out: &mut [f64]) {
    for k in 0..freqs {
        let w = if freqs == 1 {
            1.0
        } else {
            0.05 * 80f64.powf(k as f64 / (freqs - 1) as f64)
        };
        out[k] = (w * log_snr).sin();
        out[freqs + k] = (w * log_snr).cos();
    }
}

impl DenoiserParams {
    pub(crate) fn forward_cached(&self, input: &BatchInput) -> Result<(Array2<f64>, ForwardCache)> {
        let c = &self.config;
        let b = input.len();
        let tiles = c.tiles();
        let map = tile_map(c);
        let tile_out = c.tile_out();
        let sr = c.is_super_resolution();
        ensure!(
            input.x.ncols() == c.image_shape().len(),
            Shape,
            "input width {} for stage {}",
            input.x.ncols(),
            c.image_shape()
        );
        ensure!(
            !sr || input.lowres.is_some(),
            InvalidArgument,
            "super-resolution stage needs a low-resolution input"
        );

        let mut x_rows = Array2::zeros((b * tiles, c.tile_in()));
        for i in 0..b {
            for k in 0..tiles {
                let mut row = x_rows.row_mut(i * tiles + k);
                for j in 0..tile_out {
                    row[j] = input.x[[i, map[k * tile_out + j]]];
                }
                if let Some(lr) = &input.lowres {
                    lowres_window(
                        c,
                        lr.row(i),
                        k,
                        &mut row.as_slice_mut().unwrap()[tile_out..],
                    );
                }
            }
        }

        let nf = c.time_freqs;
        let mut z = Array2::zeros((b, c.film_in()));
        let mut cond_active = Vec::with_capacity(b);
        for i in 0..b {
            let mut row = z.row_mut(i);
            let slice = row.as_slice_mut().unwrap();
            time_embedding(input.log_snr[i], nf, &mut slice[..2 * nf]);
            let cond = Conditioning {
                tokens: input.tokens[i].clone(),
                lowres: None,
                null: input.null[i],
            };
            let emb = self.cond_embedding(&cond)?;
            slice[2 * nf..].copy_from_slice(emb.as_slice().unwrap());
            cond_active.push(!cond.null && c.text_conditioned && !cond.tokens.is_empty());
        }

        let weights: Vec<Array2<f64>> = self.layers.iter().map(|l| l.effective_weight()).collect();
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.films.len());
        let mut modulated = Vec::with_capacity(self.films.len());
        let mut film_scale = Vec::with_capacity(self.films.len());
        let mut h = x_rows;
        for (k, film) in self.films.iter().enumerate() {
            let layer = &self.layers[k];
            let a = h.dot(&weights[k].t()) + &layer.bias;
            let scale = z.dot(&film.scale_w.t()) + &film.scale_b;
            let shift = z.dot(&film.shift_w.t()) + &film.shift_b;
            let scale_rows = repeat_rows(&scale, tiles);
            let shift_rows = repeat_rows(&shift, tiles);
            let mut u = a.clone();
            Zip::from(&mut u)
                .and(&scale_rows)
                .and(&shift_rows)
                .for_each(|u, &s, &sh| *u = *u * (1.0 + s) + sh);
            let next = u.mapv(silu);
            inputs.push(h);
            pre.push(a);
            modulated.push(u);
            film_scale.push(scale);
            h = next;
        }
        let head = self.layers.last().unwrap();
        let y_rows = h.dot(&weights[self.films.len()].t()) + &head.bias;
        inputs.push(h);

        // skip path K (x_t - alpha * m): the linear estimate under a Gaussian
        // prior around m with grey and chroma variances per pixel, fixed or
        // predicted by the template; the trunk predicts what is left
        let template = self.template.as_ref().map(|t| {
            let cz = z.slice(s![.., 2 * nf..]);
            let a = cz.dot(&t.w1.t()) + &t.b1;
            let h = a.mapv(silu);
            let o = h.dot(&t.w2.t()) + &t.b2;
            (a, h, o)
        });
        let d = c.image_shape().len();
        let npix = d / c.channels;
        let mut out = Array2::zeros((b, d));
        let mut skip = Vec::with_capacity(b);
        for i in 0..b {
            let (alpha2, sigma2) = (sigmoid(input.log_snr[i]), sigmoid(-input.log_snr[i]));
            let alpha = alpha2.sqrt();
            let mut r = input.x.row(i).to_owned();
            if let Some(lr) = &input.lowres {
                r.scaled_add(-alpha, &lr.row(i));
            }
            let tmpl = template.as_ref().map(|(_, _, o)| o.row(i));
            if let Some(o) = &tmpl {
                r.scaled_add(-alpha, &o.slice(s![..d]));
            }
            let mut row = SkipRow {
                alpha,
                grey: vec![0.0; npix],
                gains: vec![(0.0, 0.0); npix],
                slopes: vec![(0.0, 0.0); npix],
                r,
            };
            for p in 0..npix {
                let (sl, sc) = match &tmpl {
                    Some(o) => (o[d + p], o[d + npix + p]),
                    None => (c.skip_var[0].ln(), c.skip_var[1].ln()),
                };
                let (kl, dl) = gain_and_slope(sl, alpha2, sigma2);
                let (kc, dc) = gain_and_slope(sc, alpha2, sigma2);
                row.gains[p] = (kl, kc);
                row.slopes[p] = (dl, dc);
                let px = &row.r.as_slice().unwrap()[p * c.channels..(p + 1) * c.channels];
                row.grey[p] = px.iter().sum::<f64>() / c.channels as f64;
            }
            let gate = &self.skip_gate;
            let mut o = out.row_mut(i);
            for p in 0..npix {
                let (kl, kc) = row.gains[p];
                let m = row.grey[p];
                for ch in 0..c.channels {
                    let j = p * c.channels + ch;
                    o[j] = gate[0] * kl * m + gate[1] * kc * (row.r[j] - m);
                }
            }
            skip.push(row);
        }
        for i in 0..b {
            for k in 0..tiles {
                let src = y_rows.row(i * tiles + k);
                for j in 0..tile_out {
                    out[[i, map[k * tile_out + j]]] += src[j];
                }
            }
        }
        ensure!(
            out.iter().all(|v| v.is_finite()),
            NonFinite,
            "denoiser output"
        );
        let cache = ForwardCache {
            batch: b,
            tiles,
            z,
            cond_active,
            tokens: input.tokens.clone(),
            weights,
            inputs,
            pre,
            modulated,
            film_scale,
            template,
            skip,
        };
        Ok((out, cache))
    }

    /// Reverse pass for an upstream gradient `d_out` (`B x D`, image layout).
    pub(crate) fn backward(&self, cache: &ForwardCache, d_out: &Array2<f64>) -> DenoiserParams {
        let c = &self.config;
        let tiles = cache.tiles;
        let tile_out = c.tile_out();
        let map = tile_map(c);
        let b = cache.batch;
        let mut grad = self.without_ema().zeros_like();

        let mut dy = Array2::zeros((b * tiles, tile_out));
        for i in 0..b {
            for k in 0..tiles {
                let mut row = dy.row_mut(i * tiles + k);
                for j in 0..tile_out {
                    row[j] = d_out[[i, map[k * tile_out + j]]];
                }
            }
        }

        let n_hidden = self.films.len();
        let mut dz = Array2::<f64>::zeros(cache.z.dim());
        let mut upstream = dy;
        for k in (0..=n_hidden).rev() {
            let du = if k == n_hidden {
                upstream
            } else {
                // through silu and the modulation
                let mut du = upstream;
                Zip::from(&mut du)
                    .and(&cache.modulated[k])
                    .for_each(|d, &u| *d *= silu_grad(u));
                let ds_rows = &du * &cache.pre[k];
                let ds = sum_row_groups(&ds_rows, tiles);
                let dsh = sum_row_groups(&du, tiles);
                let film = &self.films[k];
                let gf = &mut grad.films[k];
                gf.scale_w = ds.t().dot(&cache.z);
                gf.scale_b = column_sums(&ds);
                gf.shift_w = dsh.t().dot(&cache.z);
                gf.shift_b = column_sums(&dsh);
                dz = dz + ds.dot(&film.scale_w) + dsh.dot(&film.shift_w);
                let scale_rows = repeat_rows(&cache.film_scale[k], tiles);
                Zip::from(&mut du)
                    .and(&scale_rows)
                    .for_each(|d, &s| *d *= 1.0 + s);
                du
            };
            let g_w = du.t().dot(&cache.inputs[k]);
            let gl = &mut grad.layers[k];
            gl.bias = column_sums(&du);
            if let (Some(lora), Some(glora)) = (&self.layers[k].lora, &mut gl.lora) {
                let f = lora.factor();
                glora.b = g_w.dot(&lora.a.t()) * f;
                glora.a = lora.b.t().dot(&g_w) * f;
            }
            gl.weight = g_w;
            if k > 0 {
                upstream = du.dot(&cache.weights[k]);
            } else {
                upstream = Array2::zeros((0, 0));
            }
        }
        drop(upstream);

        let d = c.image_shape().len();
        let npix = d / c.channels;
        let gate = &self.skip_gate;
        // template output gradient: mean, grey and chroma log-variances
        let mut g_tmpl = cache
            .template
            .as_ref()
            .map(|_| Array2::<f64>::zeros((b, d + 2 * npix)));
        for (i, row) in cache.skip.iter().enumerate() {
            let dr = d_out.row(i);
            for p in 0..npix {
                let (kl, kc) = row.gains[p];
                let (sl, sc) = row.slopes[p];
                let m = row.grey[p];
                let px = p * c.channels..(p + 1) * c.channels;
                let d_grey = dr.slice(s![px.clone()]).sum() / c.channels as f64;
                let (mut dot_l, mut dot_c) = (0.0, 0.0);
                for j in px.clone() {
                    dot_l += dr[j] * m;
                    dot_c += dr[j] * (row.r[j] - m);
                }
                grad.skip_gate[0] += kl * dot_l;
                grad.skip_gate[1] += kc * dot_c;
                if let Some(g) = &mut g_tmpl {
                    // the grey and chroma projections are symmetric
                    for j in px {
                        g[[i, j]] =
                            -row.alpha * (gate[0] * kl * d_grey + gate[1] * kc * (dr[j] - d_grey));
                    }
                    g[[i, d + p]] = gate[0] * sl * dot_l;
                    g[[i, d + npix + p]] = gate[1] * sc * dot_c;
                }
            }
        }
        let nf = c.time_freqs;
        if let (Some(t), Some((a, h, _)), Some(gt), Some(g_out)) =
            (&self.template, &cache.template, &mut grad.template, &g_tmpl)
        {
            gt.w2 = g_out.t().dot(h);
            gt.b2 = column_sums(g_out);
            let mut g_a = g_out.dot(&t.w2);
            Zip::from(&mut g_a)
                .and(a)
                .for_each(|g, &v| *g *= silu_grad(v));
            gt.w1 = g_a.t().dot(&cache.z.slice(s![.., 2 * nf..]));
            gt.b1 = column_sums(&g_a);
            let mut dzc = dz.slice_mut(s![.., 2 * nf..]);
            dzc += &g_a.dot(&t.w1);
        }
        let dc = dz.slice(s![.., 2 * nf..]);
        let mut g_embed = Array2::<f64>::zeros(self.embed.dim());
        for i in 0..b {
            if !cache.cond_active[i] {
                continue;
            }
            let toks = &cache.tokens[i];
            let w = 1.0 / toks.len() as f64;
            for &t in toks {
                let mut row = g_embed.row_mut(t as usize);
                row.scaled_add(w, &dc.row(i));
            }
        }
        grad.embed = g_embed;
        grad
    }
}
