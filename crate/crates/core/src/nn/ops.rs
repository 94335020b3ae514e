//! Differentiable operations on [`Graph`]. Each method runs the forward
//! computation eagerly and records a closure that routes the output gradient
//! to the inputs. Tensors are `f64` and standard (row-major) layout
//! throughout; shape errors are programmer errors and panic.

use ndarray::{Array1, Array2, Array3, Array4, ArrayD, Axis, Ix1, Ix2, Ix3, Ix4, IxDyn};

use crate::nn::graph::{Graph, Var};

fn as2(v: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    v.view().into_dimensionality::<Ix2>().expect("2-d tensor")
}

fn as3(v: &ArrayD<f64>) -> ndarray::ArrayView3<'_, f64> {
    v.view().into_dimensionality::<Ix3>().expect("3-d tensor")
}

fn as4(v: &ArrayD<f64>) -> ndarray::ArrayView4<'_, f64> {
    v.view().into_dimensionality::<Ix4>().expect("4-d tensor")
}

fn scalar(v: f64) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(&[]), v)
}

impl Graph {
    // ----- elementwise -----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let out = self.value(a) + self.value(b);
        self.op(out, &[a, b], move |g, sink| {
            sink.add(a, g.clone());
            sink.add(b, g.clone());
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let out = self.value(a) - self.value(b);
        self.op(out, &[a, b], move |g, sink| {
            sink.add(a, g.clone());
            sink.add(b, -g);
        })
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let out = -self.value(a);
        self.op(out, &[a], move |g, sink| sink.add(a, -g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let av = self.value_arc(a);
        let bv = self.value_arc(b);
        let out = &*av * &*bv;
        self.op(out, &[a, b], move |g, sink| {
            sink.add(a, g * &*bv);
            sink.add(b, g * &*av);
        })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "div shape mismatch");
        let av = self.value_arc(a);
        let bv = self.value_arc(b);
        let out = &*av / &*bv;
        self.op(out, &[a, b], move |g, sink| {
            sink.add(a, g / &*bv);
            sink.add(b, -(g * &*av) / (&*bv * &*bv));
        })
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) + c;
        self.op(out, &[a], move |g, sink| sink.add(a, g.clone()))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        self.op(out, &[a], move |g, sink| sink.add(a, g * c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let av = self.value_arc(a);
        let out = av.mapv(|v| v.max(0.0));
        self.op(out, &[a], move |g, sink| {
            let mut gi = g.clone();
            ndarray::Zip::from(&mut gi).and(&*av).for_each(|gv, &x| {
                if x <= 0.0 {
                    *gv = 0.0;
                }
            });
            sink.add(a, gi);
        })
    }

    /// Square root; the backward guards the denominator so values at exactly
    /// zero do not produce non-finite gradients.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::sqrt);
        let ov = out.clone();
        self.op(out, &[a], move |g, sink| {
            sink.add(a, g / (ov.mapv(|s| s.max(1e-12)) * 2.0));
        })
    }

    // ----- reductions and broadcasts -----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let n = self.value(a).shape().to_vec();
        let out = scalar(self.value(a).sum());
        self.op(out, &[a], move |g, sink| {
            let gs = *g.iter().next().expect("scalar grad");
            sink.add(a, ArrayD::from_elem(IxDyn(&n), gs));
        })
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.mul_scalar(s, 1.0 / n)
    }

    /// Row means of a `(T, D)` tensor -> `(T,)`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = as2(self.value(a));
        let (t, d) = (v.nrows(), v.ncols());
        let out = v.mean_axis(Axis(1)).expect("nonempty").into_dyn();
        self.op(out, &[a], move |g, sink| {
            let g1 = g.view().into_dimensionality::<Ix1>().expect("1-d grad");
            let mut gi = Array2::<f64>::zeros((t, d));
            for i in 0..t {
                let gv = g1[i] / d as f64;
                gi.row_mut(i).fill(gv);
            }
            sink.add(a, gi.into_dyn());
        })
    }

    /// Replicate `(T,)` along columns to `(T, D)`.
    pub fn bcast_rows(&mut self, v: Var, d: usize) -> Var {
        let x = self.value(v).view().into_dimensionality::<Ix1>().expect("1-d");
        let t = x.len();
        let mut out = Array2::<f64>::zeros((t, d));
        for i in 0..t {
            out.row_mut(i).fill(x[i]);
        }
        self.op(out.into_dyn(), &[v], move |g, sink| {
            let g2 = g.view().into_dimensionality::<Ix2>().expect("2-d grad");
            sink.add(v, g2.sum_axis(Axis(1)).into_dyn());
        })
    }

    /// Replicate `(D,)` along rows to `(T, D)`.
    pub fn bcast_cols(&mut self, v: Var, t: usize) -> Var {
        let x = self.value(v).view().into_dimensionality::<Ix1>().expect("1-d");
        let d = x.len();
        let mut out = Array2::<f64>::zeros((t, d));
        for i in 0..t {
            out.row_mut(i).assign(&x);
        }
        self.op(out.into_dyn(), &[v], move |g, sink| {
            let g2 = g.view().into_dimensionality::<Ix2>().expect("2-d grad");
            sink.add(v, g2.sum_axis(Axis(0)).into_dyn());
        })
    }

    /// Per-channel spatial mean of `(C, H, W)` -> `(C,)`.
    pub fn spatial_mean(&mut self, a: Var) -> Var {
        let v = as3(self.value(a));
        let (c, h, w) = v.dim();
        let mut out = Array1::<f64>::zeros(c);
        for ci in 0..c {
            out[ci] = v.index_axis(Axis(0), ci).mean().expect("nonempty");
        }
        self.op(out.into_dyn(), &[a], move |g, sink| {
            let g1 = g.view().into_dimensionality::<Ix1>().expect("1-d grad");
            let mut gi = Array3::<f64>::zeros((c, h, w));
            for ci in 0..c {
                gi.index_axis_mut(Axis(0), ci).fill(g1[ci] / (h * w) as f64);
            }
            sink.add(a, gi.into_dyn());
        })
    }

    /// Broadcast `(C,)` over the spatial extent to `(C, H, W)`.
    pub fn bcast_chan(&mut self, v: Var, h: usize, w: usize) -> Var {
        let x = self.value(v).view().into_dimensionality::<Ix1>().expect("1-d");
        let c = x.len();
        let mut out = Array3::<f64>::zeros((c, h, w));
        for ci in 0..c {
            out.index_axis_mut(Axis(0), ci).fill(x[ci]);
        }
        self.op(out.into_dyn(), &[v], move |g, sink| {
            let g3 = g.view().into_dimensionality::<Ix3>().expect("3-d grad");
            let mut gi = Array1::<f64>::zeros(c);
            for ci in 0..c {
                gi[ci] = g3.index_axis(Axis(0), ci).sum();
            }
            sink.add(v, gi.into_dyn());
        })
    }

    /// Sum of `(C, H, W)` over the channel axis -> `(H, W)`.
    pub fn channel_sum(&mut self, a: Var) -> Var {
        let v = as3(self.value(a));
        let (c, h, w) = v.dim();
        let out = v.sum_axis(Axis(0));
        self.op(out.into_dyn(), &[a], move |g, sink| {
            let g2 = g.view().into_dimensionality::<Ix2>().expect("2-d grad");
            let mut gi = Array3::<f64>::zeros((c, h, w));
            for ci in 0..c {
                gi.index_axis_mut(Axis(0), ci).assign(&g2);
            }
            sink.add(a, gi.into_dyn());
        })
    }

    /// Broadcast `(H, W)` across channels to `(C, H, W)`.
    pub fn bcast_spatial(&mut self, v: Var, c: usize) -> Var {
        let x = self
            .value(v)
            .view()
            .into_dimensionality::<Ix2>()
            .expect("2-d")
            .to_owned();
        let (h, w) = x.dim();
        let mut out = Array3::<f64>::zeros((c, h, w));
        for ci in 0..c {
            out.index_axis_mut(Axis(0), ci).assign(&x);
        }
        self.op(out.into_dyn(), &[v], move |g, sink| {
            let g3 = g.view().into_dimensionality::<Ix3>().expect("3-d grad");
            sink.add(v, g3.sum_axis(Axis(0)).into_dyn());
        })
    }

    // ----- shape -----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let old: Vec<usize> = self.shape(a).to_vec();
        assert_eq!(
            self.value(a).len(),
            shape.iter().product::<usize>(),
            "reshape element count mismatch"
        );
        let out = self
            .value(a)
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("standard layout");
        self.op(out, &[a], move |g, sink| {
            sink.add(
                a,
                g.to_owned()
                    .into_shape_with_order(IxDyn(&old))
                    .expect("standard layout"),
            );
        })
    }

    pub fn transpose2(&mut self, a: Var) -> Var {
        let v = as2(self.value(a));
        let out = v.t().to_owned().as_standard_layout().to_owned();
        self.op(out.into_dyn(), &[a], move |g, sink| {
            let g2 = g.view().into_dimensionality::<Ix2>().expect("2-d grad");
            sink.add(a, g2.t().as_standard_layout().to_owned().into_dyn());
        })
    }

    /// `(C, H, W)` -> `(H*W, C)` token layout.
    pub fn chw_to_tokens(&mut self, a: Var) -> Var {
        let v = as3(self.value(a));
        let (c, h, w) = v.dim();
        let mut out = Array2::<f64>::zeros((h * w, c));
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[[y * w + x, ci]] = v[[ci, y, x]];
                }
            }
        }
        self.op(out.into_dyn(), &[a], move |g, sink| {
            let g2 = g.view().into_dimensionality::<Ix2>().expect("2-d grad");
            let mut gi = Array3::<f64>::zeros((c, h, w));
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        gi[[ci, y, x]] = g2[[y * w + x, ci]];
                    }
                }
            }
            sink.add(a, gi.into_dyn());
        })
    }

    /// `(H*W, C)` -> `(C, H, W)`.
    pub fn tokens_to_chw(&mut self, a: Var, h: usize, w: usize) -> Var {
        let v = as2(self.value(a));
        let (n, c) = v.dim();
        assert_eq!(n, h * w, "token count must equal H*W");
        let mut out = Array3::<f64>::zeros((c, h, w));
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[[ci, y, x]] = v[[y * w + x, ci]];
                }
            }
        }
        self.op(out.into_dyn(), &[a], move |g, sink| {
            let g3 = g.view().into_dimensionality::<Ix3>().expect("3-d grad");
            let mut gi = Array2::<f64>::zeros((n, c));
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        gi[[y * w + x, ci]] = g3[[ci, y, x]];
                    }
                }
            }
            sink.add(a, gi.into_dyn());
        })
    }

    /// Columns `[start, start+len)` of a `(T, D)` tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = as2(self.value(a));
        let (t, d) = v.dim();
        assert!(start + len <= d, "column slice out of range");
        let out = v
            .slice(ndarray::s![.., start..start + len])
            .as_standard_layout()
            .to_owned();
        self.op(out.into_dyn(), &[a], move |g, sink| {
            let g2 = g.view().into_dimensionality::<Ix2>().expect("2-d grad");
            let mut gi = Array2::<f64>::zeros((t, d));
            gi.slice_mut(ndarray::s![.., start..start + len]).assign(&g2);
            sink.add(a, gi.into_dyn());
        })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| self.value_arc(*p)).collect();
        let views2: Vec<_> = views.iter().map(|v| as2(v)).collect();
        let out = ndarray::concatenate(Axis(1), &views2).expect("concat cols");
        let widths: Vec<usize> = views2.iter().map(|v| v.ncols()).collect();
        let parts: Vec<Var> = parts.to_vec();
        self.op(out.into_dyn(), &parts.clone(), move |g, sink| {
            let g2 = g.view().into_dimensionality::<Ix2>().expect("2-d grad");
            let mut off = 0;
            for (p, w) in parts.iter().zip(&widths) {
                let gp = g2
                    .slice(ndarray::s![.., off..off + *w])
                    .as_standard_layout()
                    .to_owned();
                sink.add(*p, gp.into_dyn());
                off += *w;
            }
        })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| self.value_arc(*p)).collect();
        let views2: Vec<_> = views.iter().map(|v| as2(v)).collect();
        let out = ndarray::concatenate(Axis(0), &views2).expect("concat rows");
        let heights: Vec<usize> = views2.iter().map(|v| v.nrows()).collect();
        let parts: Vec<Var> = parts.to_vec();
        self.op(out.into_dyn(), &parts.clone(), move |g, sink| {
            let g2 = g.view().into_dimensionality::<Ix2>().expect("2-d grad");
            let mut off = 0;
            for (p, h) in parts.iter().zip(&heights) {
                let gp = g2
                    .slice(ndarray::s![off..off + *h, ..])
                    .as_standard_layout()
                    .to_owned();
                sink.add(*p, gp.into_dyn());
                off += *h;
            }
        })
    }

    /// Slice `a[i]` along axis 0; the backward scatters into the full shape,
    /// which is what keeps unused prompt-pool slices at exactly zero gradient.
    pub fn index_axis0(&mut self, a: Var, i: usize) -> Var {
        let full: Vec<usize> = self.shape(a).to_vec();
        assert!(i < full[0], "index {} out of range {}", i, full[0]);
        let out = self
            .value(a)
            .index_axis(Axis(0), i)
            .as_standard_layout()
            .to_owned();
        self.op(out, &[a], move |g, sink| {
            let mut gi = ArrayD::<f64>::zeros(IxDyn(&full));
            gi.index_axis_mut(Axis(0), i).assign(&g.view());
            sink.add(a, gi);
        })
    }

    // ----- linear algebra -----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.value_arc(a);
        let bv = self.value_arc(b);
        let a2 = as2(&av);
        let b2 = as2(&bv);
        assert_eq!(a2.ncols(), b2.nrows(), "matmul inner dim mismatch");
        let out = a2.dot(&b2);
        self.op(out.into_dyn(), &[a, b], move |g, sink| {
            let g2 = g.view().into_dimensionality::<Ix2>().expect("2-d grad");
            sink.add(a, g2.dot(&as2(&bv).t()).into_dyn());
            sink.add(b, as2(&av).t().dot(&g2).into_dyn());
        })
    }

    /// Row-wise softmax of a `(T, D)` tensor.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = as2(self.value(a));
        let (t, d) = v.dim();
        let mut out = Array2::<f64>::zeros((t, d));
        for i in 0..t {
            let row = v.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for j in 0..d {
                let e = (row[j] - m).exp();
                out[[i, j]] = e;
                s += e;
            }
            for j in 0..d {
                out[[i, j]] /= s;
            }
        }
        let ov = out.clone();
        self.op(out.into_dyn(), &[a], move |g, sink| {
            let g2 = g.view().into_dimensionality::<Ix2>().expect("2-d grad");
            let mut gi = Array2::<f64>::zeros((t, d));
            for i in 0..t {
                let dot: f64 = (0..d).map(|j| g2[[i, j]] * ov[[i, j]]).sum();
                for j in 0..d {
                    gi[[i, j]] = ov[[i, j]] * (g2[[i, j]] - dot);
                }
            }
            sink.add(a, gi.into_dyn());
        })
    }

    /// Cross-entropy of a logit vector `(N,)` against a class index.
    pub fn cross_entropy_logits(&mut self, logits: Var, target: usize) -> Var {
        let v = self
            .value(logits)
            .view()
            .into_dimensionality::<Ix1>()
            .expect("1-d logits")
            .to_owned();
        let n = v.len();
        assert!(target < n, "target class out of range");
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + v.mapv(|x| (x - m).exp()).sum().ln();
        let out = scalar(lse - v[target]);
        self.op(out, &[logits], move |g, sink| {
            let gs = *g.iter().next().expect("scalar grad");
            let mut gi = v.mapv(|x| (x - lse).exp());
            gi[target] -= 1.0;
            sink.add(logits, (gi * gs).into_dyn());
        })
    }

    // ----- convolution and spatial ops -----

    /// 2-d convolution: input `(Cin, H, W)`, weight `(Cout, Cin, kh, kw)`,
    /// bias `(Cout,)`, symmetric zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xv = self.value_arc(x);
        let wv = self.value_arc(w);
        let bv = self.value_arc(b);
        let x3 = as3(&xv);
        let w4 = as4(&wv);
        let (cin, h, win) = x3.dim();
        let (cout, cin_w, kh, kw) = w4.dim();
        assert_eq!(cin, cin_w, "conv2d channel mismatch");
        assert_eq!(self.value(b).len(), cout, "conv2d bias length mismatch");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (win + 2 * pad - kw) / stride + 1;

        let b1 = bv.view().into_dimensionality::<Ix1>().expect("1-d bias");
        let mut out = Array3::<f64>::zeros((cout, ho, wo));
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b1[co];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= win as isize {
                                    continue;
                                }
                                acc += x3[[ci, iy as usize, ix as usize]] * w4[[co, ci, ky, kx]];
                            }
                        }
                    }
                    out[[co, oy, ox]] = acc;
                }
            }
        }

        self.op(out.into_dyn(), &[x, w, b], move |g, sink| {
            let g3 = g.view().into_dimensionality::<Ix3>().expect("3-d grad");
            let x3 = as3(&xv);
            let w4 = as4(&wv);
            let mut gx = Array3::<f64>::zeros((cin, h, win));
            let mut gw = Array4::<f64>::zeros((cout, cin, kh, kw));
            let mut gb = Array1::<f64>::zeros(cout);
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let go = g3[[co, oy, ox]];
                        gb[co] += go;
                        for ci in 0..cin {
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= win as isize {
                                        continue;
                                    }
                                    gx[[ci, iy as usize, ix as usize]] +=
                                        w4[[co, ci, ky, kx]] * go;
                                    gw[[co, ci, ky, kx]] +=
                                        x3[[ci, iy as usize, ix as usize]] * go;
                                }
                            }
                        }
                    }
                }
            }
            sink.add(x, gx.into_dyn());
            sink.add(w, gw.into_dyn());
            sink.add(b, gb.into_dyn());
        })
    }

    /// Nearest-neighbour x2 upsampling of `(C, H, W)`.
    pub fn upsample_nearest2(&mut self, a: Var) -> Var {
        let v = as3(self.value(a));
        let (c, h, w) = v.dim();
        let mut out = Array3::<f64>::zeros((c, 2 * h, 2 * w));
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let val = v[[ci, y, x]];
                    out[[ci, 2 * y, 2 * x]] = val;
                    out[[ci, 2 * y, 2 * x + 1]] = val;
                    out[[ci, 2 * y + 1, 2 * x]] = val;
                    out[[ci, 2 * y + 1, 2 * x + 1]] = val;
                }
            }
        }
        self.op(out.into_dyn(), &[a], move |g, sink| {
            let g3 = g.view().into_dimensionality::<Ix3>().expect("3-d grad");
            let mut gi = Array3::<f64>::zeros((c, h, w));
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        gi[[ci, y, x]] = g3[[ci, 2 * y, 2 * x]]
                            + g3[[ci, 2 * y, 2 * x + 1]]
                            + g3[[ci, 2 * y + 1, 2 * x]]
                            + g3[[ci, 2 * y + 1, 2 * x + 1]];
                    }
                }
            }
            sink.add(a, gi.into_dyn());
        })
    }

    /// 2x2 average pooling; spatial dims must be even.
    pub fn avgpool2(&mut self, a: Var) -> Var {
        let v = as3(self.value(a));
        let (c, h, w) = v.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "avgpool2 needs even dims");
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Array3::<f64>::zeros((c, ho, wo));
        for ci in 0..c {
            for y in 0..ho {
                for x in 0..wo {
                    out[[ci, y, x]] = 0.25
                        * (v[[ci, 2 * y, 2 * x]]
                            + v[[ci, 2 * y, 2 * x + 1]]
                            + v[[ci, 2 * y + 1, 2 * x]]
                            + v[[ci, 2 * y + 1, 2 * x + 1]]);
                }
            }
        }
        self.op(out.into_dyn(), &[a], move |g, sink| {
            let g3 = g.view().into_dimensionality::<Ix3>().expect("3-d grad");
            let mut gi = Array3::<f64>::zeros((c, h, w));
            for ci in 0..c {
                for y in 0..ho {
                    for x in 0..wo {
                        let gq = 0.25 * g3[[ci, y, x]];
                        gi[[ci, 2 * y, 2 * x]] = gq;
                        gi[[ci, 2 * y, 2 * x + 1]] = gq;
                        gi[[ci, 2 * y + 1, 2 * x]] = gq;
                        gi[[ci, 2 * y + 1, 2 * x + 1]] = gq;
                    }
                }
            }
            sink.add(a, gi.into_dyn());
        })
    }

    /// Global average pool of `(C, H, W)` -> `(C,)`.
    pub fn global_avg_pool(&mut self, a: Var) -> Var {
        self.spatial_mean(a)
    }

    // ----- composites -----

    /// `x (T, D) @ w (D, K) + b (K)` with broadcast bias.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let t = self.shape(x)[0];
        let y = self.matmul(x, w);
        let bb = self.bcast_cols(b, t);
        self.add(y, bb)
    }

    /// Layer normalization over the last axis of `(T, D)` with learnable
    /// gain/bias, eps inside the square root.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (t, d) = {
            let s = self.shape(x);
            (s[0], s[1])
        };
        let mu = self.mean_rows(x);
        let mu_b = self.bcast_rows(mu, d);
        let xc = self.sub(x, mu_b);
        let sq = self.mul(xc, xc);
        let var = self.mean_rows(sq);
        let var_eps = self.add_scalar(var, eps);
        let std = self.sqrt(var_eps);
        let std_b = self.bcast_rows(std, d);
        let xhat = self.div(xc, std_b);
        let gb = self.bcast_cols(gamma, t);
        let bb = self.bcast_cols(beta, t);
        let scaled = self.mul(xhat, gb);
        self.add(scaled, bb)
    }

    /// Cosine similarity of two 1-d vectors with an epsilon guard on each
    /// norm: `dot / ((|a| + eps) * (|b| + eps))`.
    pub fn cosine_1d(&mut self, a: Var, b: Var, eps: f64) -> Var {
        let prod = self.mul(a, b);
        let dot = self.sum_all(prod);
        let aa = self.mul(a, a);
        let sa = self.sum_all(aa);
        let na = self.sqrt(sa);
        let bb = self.mul(b, b);
        let sb = self.sum_all(bb);
        let nb = self.sqrt(sb);
        let na_e = self.add_scalar(na, eps);
        let nb_e = self.add_scalar(nb, eps);
        let denom = self.mul(na_e, nb_e);
        self.div(dot, denom)
    }
}
