//! E(n)-equivariant message passing over the fully connected atom graph.
//!
//! Per layer, for every ordered pair `i != j`:
//!
//! ```text
//! m_ij = phi_e(h_i, h_j, |x_i - x_j|^2)
//! x_i <- x_i + sum_j (x_i - x_j) phi_x(m_ij) / (|x_i - x_j| + 1)
//! h_i <- h_i + phi_h(h_i, sum_j m_ij)
//! ```
//!
//! With `F_x` the centered displacement `x^L - x^0` and `F_h` a linear
//! read-out of `h^L`, the noise estimate is `sigma_t z_t + alpha_t F`. The
//! skip term is the exact answer for Gaussian data, and scaling the learned
//! part by `alpha_t` keeps its errors from being amplified by `1 / alpha_{t|s}`
//! near `t = T`, where that factor is in the thousands.

use ndarray::{s, Array2, ArrayView1};

use crate::denoiser::params::{DenoiserParams, EgnnLayer, GradientBundle};
use crate::denoiser::{LatentState, Prediction};
use crate::error::{Error, Result};
use crate::molgraph::remove_mean;
use crate::schedule::alpha_at;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(a: &Array2<f64>) -> Array2<f64> {
    a.mapv(|x| x * sigmoid(x))
}

/// `g * silu'(a)`
fn silu_backward(a: &Array2<f64>, g: &Array2<f64>) -> Array2<f64> {
    let mut out = g.clone();
    out.zip_mut_with(a, |gv, &x| {
        let s = sigmoid(x);
        *gv *= s * (1.0 + x * (1.0 - s));
    });
    out
}

fn check_finite(a: &Array2<f64>, location: impl FnOnce() -> String) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            location: location(),
        })
    }
}

/// Ordered atom pairs `(src, dst)` with `src != dst`.
fn edges(n: usize) -> (Vec<usize>, Vec<usize>) {
    let mut src = Vec::with_capacity(n * n.saturating_sub(1));
    let mut dst = Vec::with_capacity(src.capacity());
    for i in 0..n {
        for j in 0..n {
            if i != j {
                src.push(i);
                dst.push(j);
            }
        }
    }
    (src, dst)
}

struct LayerCache {
    h: Array2<f64>,
    diff: Array2<f64>,
    dist: Vec<f64>,
    edge_in: Array2<f64>,
    a1: Array2<f64>,
    s1: Array2<f64>,
    a2: Array2<f64>,
    m: Array2<f64>,
    c1: Array2<f64>,
    sc: Array2<f64>,
    w: Vec<f64>,
    node_in: Array2<f64>,
    n1: Array2<f64>,
    sn: Array2<f64>,
}

/// Activations kept from a forward pass for the reverse sweep.
pub struct ForwardCache {
    input: Array2<f64>,
    src: Vec<usize>,
    dst: Vec<usize>,
    layers: Vec<LayerCache>,
    h_final: Array2<f64>,
    alpha: f64,
}

pub(crate) fn check_state(params: &DenoiserParams, state: &LatentState) -> Result<()> {
    let arch = &params.arch;
    let m = state.z_x.nrows();
    if m == 0 || state.z_x.ncols() != 3 {
        return Err(Error::Model(format!(
            "coordinate block must be Mx3, got {:?}",
            state.z_x.shape()
        )));
    }
    if state.z_h.nrows() != m || state.z_h.ncols() != arch.vocab_size {
        return Err(Error::Model(format!(
            "feature block is {:?}, expected [{m}, {}]",
            state.z_h.shape(),
            arch.vocab_size
        )));
    }
    if state.condition.len() != arch.condition_dim {
        return Err(Error::Model(format!(
            "condition has {} entries, model expects {}",
            state.condition.len(),
            arch.condition_dim
        )));
    }
    if state.t > arch.steps {
        return Err(Error::Model(format!(
            "timestep {} beyond schedule length {}",
            state.t, arch.steps
        )));
    }
    Ok(())
}

fn layer_forward(
    layer: &EgnnLayer,
    l: usize,
    x: &Array2<f64>,
    h: &Array2<f64>,
    src: &[usize],
    dst: &[usize],
) -> Result<(Array2<f64>, Array2<f64>, LayerCache)> {
    let (n, hid) = (h.nrows(), h.ncols());
    let e = src.len();
    let mut diff = Array2::zeros((e, 3));
    let mut dist = Vec::with_capacity(e);
    let mut edge_in = Array2::zeros((e, 2 * hid + 1));
    for k in 0..e {
        let (i, j) = (src[k], dst[k]);
        let mut d2 = 0.0;
        for a in 0..3 {
            let v = x[[i, a]] - x[[j, a]];
            diff[[k, a]] = v;
            d2 += v * v;
        }
        dist.push(d2.sqrt());
        edge_in.slice_mut(s![k, ..hid]).assign(&h.row(i));
        edge_in.slice_mut(s![k, hid..2 * hid]).assign(&h.row(j));
        edge_in[[k, 2 * hid]] = d2;
    }
    let a1 = layer.edge1.apply(&edge_in);
    let s1 = silu(&a1);
    let a2 = layer.edge2.apply(&s1);
    let m = silu(&a2);
    let c1 = layer.coord1.apply(&m);
    let sc = silu(&c1);
    let w: Vec<f64> = layer.coord2.apply(&sc).column(0).to_vec();

    let mut x_new = x.clone();
    let mut agg = Array2::zeros((n, hid));
    for k in 0..e {
        let i = src[k];
        let coef = w[k] / (dist[k] + 1.0);
        for a in 0..3 {
            x_new[[i, a]] += diff[[k, a]] * coef;
        }
        let mut row = agg.row_mut(i);
        row += &m.row(k);
    }
    let mut node_in = Array2::zeros((n, 2 * hid));
    node_in.slice_mut(s![.., ..hid]).assign(h);
    node_in.slice_mut(s![.., hid..]).assign(&agg);
    let n1 = layer.node1.apply(&node_in);
    let sn = silu(&n1);
    let h_new = h + &layer.node2.apply(&sn);

    check_finite(&x_new, || format!("egnn layer {l} coordinates"))?;
    check_finite(&h_new, || format!("egnn layer {l} features"))?;
    let cache = LayerCache {
        h: h.clone(),
        diff,
        dist,
        edge_in,
        a1,
        s1,
        a2,
        m,
        c1,
        sc,
        w,
        node_in,
        n1,
        sn,
    };
    Ok((x_new, h_new, cache))
}

fn node_inputs(params: &DenoiserParams, state: &LatentState) -> Array2<f64> {
    let arch = &params.arch;
    let n = state.z_x.nrows();
    let v = arch.vocab_size;
    let time = state.t as f64 / arch.steps as f64;
    let mut input = Array2::zeros((n, arch.input_width()));
    input.slice_mut(s![.., ..v]).assign(&state.z_h);
    input.column_mut(v).fill(time);
    for (c, &val) in state.condition.iter().enumerate() {
        input.column_mut(v + 1 + c).fill(val);
    }
    input
}

/// Runs the network and keeps every activation for [`backward`].
pub fn forward_cached(
    params: &DenoiserParams,
    state: &LatentState,
) -> Result<(Prediction, ForwardCache)> {
    check_state(params, state)?;
    if state
        .z_x
        .iter()
        .chain(state.z_h.iter())
        .chain(state.condition.iter())
        .any(|v| !v.is_finite())
    {
        return Err(Error::NonFinite {
            location: "denoiser input".into(),
        });
    }
    let w = &params.weights;
    let x0 = remove_mean(&state.z_x);
    let input = node_inputs(params, state);
    let mut h = w.embed.apply(&input);
    check_finite(&h, || "embedding".into())?;
    let (src, dst) = edges(x0.nrows());
    let mut x = x0.clone();
    let mut layers = Vec::with_capacity(w.layers.len());
    for (l, layer) in w.layers.iter().enumerate() {
        let (x_new, h_new, cache) = layer_forward(layer, l, &x, &h, &src, &dst)?;
        layers.push(cache);
        x = x_new;
        h = h_new;
    }
    let alpha = alpha_at(state.t, params.arch.steps, params.arch.clamp);
    let sigma = (1.0 - alpha * alpha).max(0.0).sqrt();
    let eps_h = &state.z_h * sigma + &(w.out.apply(&h) * alpha);
    check_finite(&eps_h, || "output head".into())?;
    let eps_x = &x0 * sigma + &(remove_mean(&(&x - &x0)) * alpha);
    Ok((
        Prediction { eps_x, eps_h },
        ForwardCache {
            input,
            src,
            dst,
            layers,
            h_final: h,
            alpha,
        },
    ))
}

/// Reverse sweep: adds `d loss / d params` for upstream output adjoints into `grad`.
pub fn backward(
    params: &DenoiserParams,
    cache: &ForwardCache,
    g_eps_x: &Array2<f64>,
    g_eps_h: &Array2<f64>,
    grad: &mut GradientBundle,
) -> Result<()> {
    let w = &params.weights;
    let gw = &mut grad.weights;
    let mut g_h = w
        .out
        .backward(&cache.h_final, &(g_eps_h * cache.alpha), &mut gw.out);
    // projection is symmetric, so its adjoint is itself; x^0 is an input
    let mut g_x = remove_mean(g_eps_x) * cache.alpha;
    let (src, dst) = (&cache.src, &cache.dst);

    for (l, (layer, lc)) in w.layers.iter().zip(&cache.layers).enumerate().rev() {
        let gl = &mut gw.layers[l];
        let hid = lc.h.ncols();

        // node update: h' = h + node2(silu(node1([h, agg])))
        let g_sn = layer.node2.backward(&lc.sn, &g_h, &mut gl.node2);
        let g_n1 = silu_backward(&lc.n1, &g_sn);
        let g_node_in = layer.node1.backward(&lc.node_in, &g_n1, &mut gl.node1);
        let mut g_h_prev = g_h.clone();
        g_h_prev += &g_node_in.slice(s![.., ..hid]);
        let g_agg = g_node_in.slice(s![.., hid..]);

        let e = src.len();
        let mut g_m = Array2::zeros((e, hid));
        for k in 0..e {
            g_m.row_mut(k).assign(&g_agg.row(src[k]));
        }

        // coordinate update: x' = x + sum_j diff * w / (dist + 1)
        let mut g_x_prev = g_x.clone();
        let mut g_w = Array2::zeros((e, 1));
        let mut g_d2 = vec![0.0; e];
        for k in 0..e {
            let (i, j) = (src[k], dst[k]);
            let denom = lc.dist[k] + 1.0;
            let coef = lc.w[k] / denom;
            let gx_i: ArrayView1<f64> = g_x.row(i);
            let g_coef: f64 = (0..3).map(|a| gx_i[a] * lc.diff[[k, a]]).sum();
            for a in 0..3 {
                let gd = gx_i[a] * coef;
                g_x_prev[[i, a]] += gd;
                g_x_prev[[j, a]] -= gd;
            }
            g_w[[k, 0]] = g_coef / denom;
            let g_dist = -g_coef * lc.w[k] / (denom * denom);
            if lc.dist[k] > 0.0 {
                g_d2[k] += g_dist / (2.0 * lc.dist[k]);
            }
        }
        let g_sc = layer.coord2.backward(&lc.sc, &g_w, &mut gl.coord2);
        let g_c1 = silu_backward(&lc.c1, &g_sc);
        g_m += &layer.coord1.backward(&lc.m, &g_c1, &mut gl.coord1);

        // edge network
        let g_a2 = silu_backward(&lc.a2, &g_m);
        let g_s1 = layer.edge2.backward(&lc.s1, &g_a2, &mut gl.edge2);
        let g_a1 = silu_backward(&lc.a1, &g_s1);
        let g_edge_in = layer.edge1.backward(&lc.edge_in, &g_a1, &mut gl.edge1);
        for k in 0..e {
            let (i, j) = (src[k], dst[k]);
            {
                let mut row = g_h_prev.row_mut(i);
                row += &g_edge_in.slice(s![k, ..hid]);
            }
            {
                let mut row = g_h_prev.row_mut(j);
                row += &g_edge_in.slice(s![k, hid..2 * hid]);
            }
            let gd = g_d2[k] + g_edge_in[[k, 2 * hid]];
            for a in 0..3 {
                let v = 2.0 * gd * lc.diff[[k, a]];
                g_x_prev[[i, a]] += v;
                g_x_prev[[j, a]] -= v;
            }
        }
        check_finite(&g_h_prev, || format!("egnn layer {l} feature adjoint"))?;
        check_finite(&g_x_prev, || format!("egnn layer {l} coordinate adjoint"))?;
        g_h = g_h_prev;
        g_x = g_x_prev;
    }
    w.embed.backward(&cache.input, &g_h, &mut gw.embed);
    Ok(())
}
