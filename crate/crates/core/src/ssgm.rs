//! Segmentation-guided modulation: two spatially-adaptive normalization
//! stages applied coarse-to-fine.
//!
//! One stage computes
//!
//! ```text
//! h   = relu(conv3x3(seg))
//! out = spatial_norm(x) * conv3x3_gamma(h) + conv3x3_beta(h)
//! ```
//!
//! and the module chains `stage2(relu(stage1(x)))`, both stages reading the
//! same segmentation map.

use crate::error::{dim_err, Result};
use crate::params::{Affine, Bound, ParamStore};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::TokenGrid;

#[derive(Clone, Copy, Debug)]
pub struct SpadeParams {
    pub shared_conv: Affine,
    pub gamma_conv: Affine,
    pub beta_conv: Affine,
}

impl SpadeParams {
    /// Gamma bias starts at 1 and beta bias at 0, so an untrained stage is
    /// close to plain normalization.
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        seg_channels: usize,
        hidden: usize,
        channels: usize,
        rng: &mut Rng,
    ) -> Self {
        Self {
            shared_conv: Affine::conv(store, &format!("{name}.shared_conv"), seg_channels, hidden, 3, 0.0, rng),
            gamma_conv: Affine::conv(store, &format!("{name}.gamma_conv"), hidden, channels, 3, 1.0, rng),
            beta_conv: Affine::conv(store, &format!("{name}.beta_conv"), hidden, channels, 3, 0.0, rng),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SsgmParams {
    pub stage1: SpadeParams,
    pub stage2: SpadeParams,
}

impl SsgmParams {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        seg_channels: usize,
        hidden: usize,
        channels: usize,
        rng: &mut Rng,
    ) -> Self {
        Self {
            stage1: SpadeParams::init(store, &format!("{name}.stage1"), seg_channels, hidden, channels, rng),
            stage2: SpadeParams::init(store, &format!("{name}.stage2"), seg_channels, hidden, channels, rng),
        }
    }
}

/// Gamma and beta fields of one stage, kept for inspection.
#[derive(Clone, Copy, Debug)]
pub struct Modulation {
    pub gamma: Var,
    pub beta: Var,
    pub output: Var,
}

pub fn spade_modulate_on(
    tape: &mut Tape,
    b: &Bound,
    p: &SpadeParams,
    x: Var,
    seg: Var,
) -> Result<Modulation> {
    let (xs, ss) = (tape.shape(x), tape.shape(seg));
    if xs.len() != 3 || ss.len() != 3 || xs[1..] != ss[1..] {
        return dim_err(format!("spade: feature {xs:?} and segmentation {ss:?} extents differ"));
    }
    let h = p.shared_conv.apply_conv(tape, b, seg, 1)?;
    let h = tape.relu(h)?;
    let gamma = p.gamma_conv.apply_conv(tape, b, h, 1)?;
    let beta = p.beta_conv.apply_conv(tape, b, h, 1)?;
    let normed = tape.spatial_norm(x)?;
    let scaled = tape.mul(normed, gamma)?;
    let output = tape.add(scaled, beta)?;
    Ok(Modulation { gamma, beta, output })
}

pub fn ssgm_forward_on(tape: &mut Tape, b: &Bound, p: &SsgmParams, x: Var, seg: Var) -> Result<Var> {
    let y1 = spade_modulate_on(tape, b, &p.stage1, x, seg)?.output;
    let y1 = tape.relu(y1)?;
    Ok(spade_modulate_on(tape, b, &p.stage2, y1, seg)?.output)
}

pub fn spade_modulate(
    x: &TokenGrid,
    seg: &TokenGrid,
    p: &SpadeParams,
    store: &ParamStore,
) -> Result<TokenGrid> {
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let xv = tape.constant(x.tensor().clone());
    let sv = tape.constant(seg.tensor().clone());
    let out = spade_modulate_on(&mut tape, &b, p, xv, sv)?.output;
    TokenGrid::from_tensor(tape.value(out).clone())
}

pub fn ssgm_forward(
    x_img: &TokenGrid,
    seg: &TokenGrid,
    p: &SsgmParams,
    store: &ParamStore,
) -> Result<TokenGrid> {
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let xv = tape.constant(x_img.tensor().clone());
    let sv = tape.constant(seg.tensor().clone());
    let out = ssgm_forward_on(&mut tape, &b, p, xv, sv)?;
    TokenGrid::from_tensor(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;
    use crate::tensor::Tensor;

    fn random_grid(c: usize, h: usize, w: usize, rng: &mut Rng) -> TokenGrid {
        TokenGrid::new(c, h, w, (0..c * h * w).map(|_| rng.range(-1.5, 1.5)).collect()).unwrap()
    }

    fn one_hot_seg(c: usize, h: usize, w: usize, rng: &mut Rng) -> TokenGrid {
        let mut g = TokenGrid::zeros(c, h, w);
        for y in 0..h {
            for x in 0..w {
                g.set(rng.below(c), y, x, 1.0);
            }
        }
        g
    }

    fn identity_stage(store: &mut ParamStore, p: &SpadeParams) {
        for a in [p.gamma_conv, p.beta_conv] {
            store.get_mut(a.weight).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        store.get_mut(p.gamma_conv.bias).data_mut().iter_mut().for_each(|v| *v = 1.0);
        store.get_mut(p.beta_conv.bias).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }

    /// Plain nested-loop convolution with zero padding.
    fn conv_ref(x: &TokenGrid, w: &Tensor, b: &Tensor) -> Vec<Vec<Vec<f64>>> {
        let s = w.shape();
        let (co, ci, k) = (s[0], s[1], s[2]);
        let (h, wd) = (x.height(), x.width());
        let mut out = vec![vec![vec![0.0; wd]; h]; co];
        for o in 0..co {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = b.data()[o];
                    for c in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = y as isize + ky as isize - 1;
                                let ix = xx as isize + kx as isize - 1;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += w.data()[((o * ci + c) * k + ky) * k + kx]
                                    * x.get(c, iy as usize, ix as usize);
                            }
                        }
                    }
                    out[o][y][xx] = acc;
                }
            }
        }
        out
    }

    /// Straight-line evaluation of one modulation stage.
    fn spade_ref(x: &TokenGrid, seg: &TokenGrid, p: &SpadeParams, s: &ParamStore) -> TokenGrid {
        let hid = conv_ref(seg, s.get(p.shared_conv.weight), s.get(p.shared_conv.bias));
        let (c_h, h, w) = (hid.len(), x.height(), x.width());
        let mut hid_grid = TokenGrid::zeros(c_h, h, w);
        for c in 0..c_h {
            for y in 0..h {
                for xx in 0..w {
                    hid_grid.set(c, y, xx, hid[c][y][xx].max(0.0));
                }
            }
        }
        let gamma = conv_ref(&hid_grid, s.get(p.gamma_conv.weight), s.get(p.gamma_conv.bias));
        let beta = conv_ref(&hid_grid, s.get(p.beta_conv.weight), s.get(p.beta_conv.bias));
        let mut out = TokenGrid::zeros(x.channels(), h, w);
        let n = (h * w) as f64;
        for c in 0..x.channels() {
            let mut mean = 0.0;
            for y in 0..h {
                for xx in 0..w {
                    mean += x.get(c, y, xx);
                }
            }
            mean /= n;
            let mut var = 0.0;
            for y in 0..h {
                for xx in 0..w {
                    var += (x.get(c, y, xx) - mean).powi(2);
                }
            }
            var /= n;
            for y in 0..h {
                for xx in 0..w {
                    let norm = (x.get(c, y, xx) - mean) / (var + 1e-5).sqrt();
                    out.set(c, y, xx, norm * gamma[c][y][xx] + beta[c][y][xx]);
                }
            }
        }
        out
    }

    fn setup(d: usize, cs: usize, seed: u64) -> (ParamStore, SsgmParams) {
        let mut rng = Rng::from_seed(seed);
        let mut store = ParamStore::new();
        let p = SsgmParams::init(&mut store, "ssgm", cs, 8, d, &mut rng);
        // perturb biases away from their structured init
        for id in store.ids().collect::<Vec<_>>() {
            let t = store.get_mut(id);
            if t.shape().len() == 1 {
                for v in t.data_mut() {
                    *v += rng.range(-0.3, 0.3);
                }
            }
        }
        (store, p)
    }

    #[test]
    fn matches_nested_loop_oracle() {
        let (store, p) = setup(4, 6, 11);
        let mut rng = Rng::from_seed(12);
        let x = random_grid(4, 8, 8, &mut rng);
        let seg = one_hot_seg(6, 8, 8, &mut rng);
        let got = spade_modulate(&x, &seg, &p.stage1, &store).unwrap();
        let want = spade_ref(&x, &seg, &p.stage1, &store);
        assert!(got.tensor().max_abs_diff(want.tensor()) < 1e-12);

        let got = ssgm_forward(&x, &seg, &p, &store).unwrap();
        let mid = spade_ref(&x, &seg, &p.stage1, &store);
        let mid = ops::relu(mid.tensor()).unwrap();
        let want = spade_ref(&TokenGrid::from_tensor(mid).unwrap(), &seg, &p.stage2, &store);
        assert!(got.tensor().max_abs_diff(want.tensor()) < 1e-12);
    }

    #[test]
    fn identity_modulation() {
        let (mut store, p) = setup(4, 3, 1);
        identity_stage(&mut store, &p.stage1);
        identity_stage(&mut store, &p.stage2);
        let mut rng = Rng::from_seed(2);
        let x = random_grid(4, 4, 4, &mut rng);
        let seg = one_hot_seg(3, 4, 4, &mut rng);
        let once = spade_modulate(&x, &seg, &p.stage1, &store).unwrap();
        assert_eq!(once, ops::spatial_norm(&x).unwrap());
        let both = ssgm_forward(&x, &seg, &p, &store).unwrap();
        let n1 = ops::spatial_norm(&x).unwrap();
        let r = TokenGrid::from_tensor(ops::relu(n1.tensor()).unwrap()).unwrap();
        assert_eq!(both, ops::spatial_norm(&r).unwrap());
    }

    #[test]
    fn constant_input_yields_beta() {
        let (store, p) = setup(3, 3, 5);
        let mut rng = Rng::from_seed(6);
        let x = TokenGrid::new(3, 4, 4, vec![0.7; 48]).unwrap();
        let seg = one_hot_seg(3, 4, 4, &mut rng);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let xv = tape.constant(x.tensor().clone());
        let sv = tape.constant(seg.tensor().clone());
        let m = spade_modulate_on(&mut tape, &b, &p.stage1, xv, sv).unwrap();
        assert_eq!(tape.data(m.output), tape.data(m.beta));
    }

    #[test]
    fn uniform_background_gives_uniform_fields_inside() {
        let (store, p) = setup(4, 6, 9);
        let mut seg = TokenGrid::zeros(6, 6, 6);
        for y in 0..6 {
            for x in 0..6 {
                seg.set(0, y, x, 1.0);
            }
        }
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let mut rng = Rng::from_seed(3);
        let xv = tape.constant(random_grid(4, 6, 6, &mut rng).into_tensor());
        let sv = tape.constant(seg.into_tensor());
        let m = spade_modulate_on(&mut tape, &b, &p.stage1, xv, sv).unwrap();
        // the two stacked 3x3 convs see a constant field two pixels in
        for field in [m.gamma, m.beta] {
            let g = TokenGrid::from_tensor(tape.value(field).clone()).unwrap();
            for c in 0..4 {
                let v0 = g.get(c, 2, 2);
                for (y, x) in [(2, 3), (3, 2), (3, 3)] {
                    assert!((g.get(c, y, x) - v0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn constant_shift_invariance() {
        let (store, p) = setup(4, 3, 21);
        let mut rng = Rng::from_seed(22);
        let x = random_grid(4, 4, 4, &mut rng);
        let seg = one_hot_seg(3, 4, 4, &mut rng);
        let shifted =
            TokenGrid::new(4, 4, 4, x.data().iter().map(|v| v + 3.25).collect()).unwrap();
        let a = ssgm_forward(&x, &seg, &p, &store).unwrap();
        let b = ssgm_forward(&shifted, &seg, &p, &store).unwrap();
        assert!(a.tensor().max_abs_diff(b.tensor()) < 1e-9);
        assert_eq!(a.channels(), 4);
        assert_eq!((a.height(), a.width()), (4, 4));
    }

    #[test]
    fn spatial_mismatch_is_rejected() {
        let (store, p) = setup(4, 3, 0);
        let x = TokenGrid::zeros(4, 4, 4);
        let seg = TokenGrid::zeros(3, 2, 4);
        assert!(spade_modulate(&x, &seg, &p.stage1, &store).is_err());
    }
}
