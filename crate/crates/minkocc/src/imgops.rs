//! Dense image ops on tape variables.
//!
//! Images are (C,H,W) arrays. Convolutions use clamp-to-edge padding so a
//! constant image stays constant through any kernel whose weights sum to one,
//! and strided output sizes are `ceil(len/stride)`. Sampling coordinates put
//! pixel centers at half-integers: the center of pixel (x,y) is (x+0.5, y+0.5).

use std::rc::Rc;

use ndarray::{Array1, Array2, Array3, ArrayD, Ix1, Ix3, IxDyn};

use crate::tape::{Arr, Var};

fn as3(a: &Arr) -> ndarray::ArrayView3<'_, f64> {
    a.view().into_dimensionality::<Ix3>().expect("3-D image")
}

fn as1(a: &Arr) -> ndarray::ArrayView1<'_, f64> {
    a.view().into_dimensionality::<Ix1>().expect("1-D vector")
}

fn clamp(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

impl<'t> Var<'t> {
    /// 2-D convolution of a (Cin,H,W) image with (Cout,Cin,k,k) weights and a
    /// (Cout,) bias. Odd kernel, clamp padding, stride 1 or more.
    pub fn conv2d(self, w: Var<'t>, b: Var<'t>, stride: usize) -> Var<'t> {
        let x_id = self.id;
        let w_id = w.id;
        let b_id = b.id;
        let tape = self.tape;
        let v = tape.with_value(x_id, |xv| {
            tape.with_value(w_id, |wv| {
                tape.with_value(b_id, |bv| {
                    let x = as3(xv);
                    let wz = wv.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                    let bb = as1(bv);
                    let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                    let (cout, k) = (wz.shape()[0], wz.shape()[2]);
                    assert_eq!(wz.shape()[1], cin, "conv2d channel mismatch");
                    assert_eq!(wz.shape()[3], k, "conv2d kernel must be square");
                    assert_eq!(k % 2, 1, "conv2d kernel must be odd");
                    let pad = (k - 1) / 2;
                    let oh = h.div_ceil(stride);
                    let ow = wd.div_ceil(stride);
                    let mut out = Array3::<f64>::zeros((cout, oh, ow));
                    for co in 0..cout {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut acc = bb[co];
                                for ci in 0..cin {
                                    for ky in 0..k {
                                        let iy =
                                            clamp((oy * stride + ky) as isize - pad as isize, h);
                                        for kx in 0..k {
                                            let ix = clamp(
                                                (ox * stride + kx) as isize - pad as isize,
                                                wd,
                                            );
                                            acc += wz[[co, ci, ky, kx]] * x[[ci, iy, ix]];
                                        }
                                    }
                                }
                                out[[co, oy, ox]] = acc;
                            }
                        }
                    }
                    out.into_dyn()
                })
            })
        });
        let x_shape = self.shape();
        let w_shape = w.shape();
        let wants = tape.wants_any(&[x_id, w_id, b_id]);
        let id = tape.push_raw(
            v,
            wants,
            wants.then(|| -> Box<dyn Fn(&crate::tape::BackCtx, &Arr, &mut crate::tape::GradSink)> {
                Box::new(move |ctx, g, sink| {
                    let g3 = as3(g);
                    let (cout, oh, ow) = (g3.shape()[0], g3.shape()[1], g3.shape()[2]);
                    let (cin, h, wd) = (x_shape[0], x_shape[1], x_shape[2]);
                    let k = w_shape[2];
                    let pad = (k - 1) / 2;
                    let wants_x = sink.wants(x_id);
                    let wants_w = sink.wants(w_id);
                    let mut dx = Array3::<f64>::zeros((cin, h, wd));
                    let mut dw = ArrayD::<f64>::zeros(IxDyn(&w_shape));
                    {
                        let xv = ctx.v(x_id);
                        let x = as3(xv);
                        let wv = ctx.v(w_id);
                        let wz = wv.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                        let mut dw4 = dw.view_mut().into_dimensionality::<ndarray::Ix4>().unwrap();
                        for co in 0..cout {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let gv = g3[[co, oy, ox]];
                                    if gv == 0.0 {
                                        continue;
                                    }
                                    for ci in 0..cin {
                                        for ky in 0..k {
                                            let iy = clamp(
                                                (oy * stride + ky) as isize - pad as isize,
                                                h,
                                            );
                                            for kx in 0..k {
                                                let ix = clamp(
                                                    (ox * stride + kx) as isize - pad as isize,
                                                    wd,
                                                );
                                                if wants_x {
                                                    dx[[ci, iy, ix]] += gv * wz[[co, ci, ky, kx]];
                                                }
                                                if wants_w {
                                                    dw4[[co, ci, ky, kx]] += gv * x[[ci, iy, ix]];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    if wants_x {
                        sink.add(x_id, dx.into_dyn());
                    }
                    if wants_w {
                        sink.add(w_id, dw);
                    }
                    if sink.wants(b_id) {
                        let mut db = Array1::<f64>::zeros(cout);
                        for co in 0..cout {
                            db[co] = g3.index_axis(ndarray::Axis(0), co).sum();
                        }
                        sink.add(b_id, db.into_dyn());
                    }
                })
            }),
        );
        Var::from_raw(tape, id)
    }

    /// Nearest-neighbor 2x upsample of (C,H,W) -> (C,2H,2W).
    pub fn upsample2x_nearest(self) -> Var<'t> {
        let tape = self.tape;
        let x_id = self.id;
        let v = tape.with_value(x_id, |xv| {
            let x = as3(xv);
            let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let mut out = Array3::<f64>::zeros((c, 2 * h, 2 * w));
            for ci in 0..c {
                for y in 0..2 * h {
                    for xq in 0..2 * w {
                        out[[ci, y, xq]] = x[[ci, y / 2, xq / 2]];
                    }
                }
            }
            out.into_dyn()
        });
        let wants = tape.wants_any(&[x_id]);
        let id = tape.push_raw(
            v,
            wants,
            wants.then(|| -> Box<dyn Fn(&crate::tape::BackCtx, &Arr, &mut crate::tape::GradSink)> {
                Box::new(move |_ctx, g, sink| {
                    let g3 = as3(g);
                    let (c, gh, gw) = (g3.shape()[0], g3.shape()[1], g3.shape()[2]);
                    let mut dx = Array3::<f64>::zeros((c, gh / 2, gw / 2));
                    for ci in 0..c {
                        for y in 0..gh {
                            for xq in 0..gw {
                                dx[[ci, y / 2, xq / 2]] += g3[[ci, y, xq]];
                            }
                        }
                    }
                    sink.add(x_id, dx.into_dyn());
                })
            }),
        );
        Var::from_raw(tape, id)
    }

    /// Bilinear sampling of a (C,H,W) image at continuous pixel coordinates,
    /// border-clamped. Returns (P,C) rows.
    pub fn bilinear_sample(self, uv: Rc<Vec<(f64, f64)>>) -> Var<'t> {
        let tape = self.tape;
        let x_id = self.id;
        let v = tape.with_value(x_id, |xv| {
            let x = as3(xv);
            let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let mut out = Array2::<f64>::zeros((uv.len(), c));
            for (p, &(u, vv)) in uv.iter().enumerate() {
                let fx = u - 0.5;
                let fy = vv - 0.5;
                let x0 = fx.floor();
                let y0 = fy.floor();
                let tx = fx - x0;
                let ty = fy - y0;
                let x0c = clamp(x0 as isize, w);
                let x1c = clamp(x0 as isize + 1, w);
                let y0c = clamp(y0 as isize, h);
                let y1c = clamp(y0 as isize + 1, h);
                for ci in 0..c {
                    out[[p, ci]] = (1.0 - ty)
                        * ((1.0 - tx) * x[[ci, y0c, x0c]] + tx * x[[ci, y0c, x1c]])
                        + ty * ((1.0 - tx) * x[[ci, y1c, x0c]] + tx * x[[ci, y1c, x1c]]);
                }
            }
            out.into_dyn()
        });
        let shape = self.shape();
        let uv_b = uv.clone();
        let wants = tape.wants_any(&[x_id]);
        let id = tape.push_raw(
            v,
            wants,
            wants.then(|| -> Box<dyn Fn(&crate::tape::BackCtx, &Arr, &mut crate::tape::GradSink)> {
                Box::new(move |_ctx, g, sink| {
                    let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                    let (c, h, w) = (shape[0], shape[1], shape[2]);
                    sink.with(x_id, &shape, |slot| {
                        let mut dx = slot.view_mut().into_dimensionality::<Ix3>().unwrap();
                        for (p, &(u, vv)) in uv_b.iter().enumerate() {
                            let fx = u - 0.5;
                            let fy = vv - 0.5;
                            let x0 = fx.floor();
                            let y0 = fy.floor();
                            let tx = fx - x0;
                            let ty = fy - y0;
                            let x0c = clamp(x0 as isize, w);
                            let x1c = clamp(x0 as isize + 1, w);
                            let y0c = clamp(y0 as isize, h);
                            let y1c = clamp(y0 as isize + 1, h);
                            for ci in 0..c {
                                let gv = g2[[p, ci]];
                                dx[[ci, y0c, x0c]] += gv * (1.0 - ty) * (1.0 - tx);
                                dx[[ci, y0c, x1c]] += gv * (1.0 - ty) * tx;
                                dx[[ci, y1c, x0c]] += gv * ty * (1.0 - tx);
                                dx[[ci, y1c, x1c]] += gv * ty * tx;
                            }
                        }
                    });
                })
            }),
        );
        Var::from_raw(tape, id)
    }

    /// Scatter (P,C) rows into a (C,H,W) image at flat pixel indices y*W+x,
    /// accumulating on collisions.
    pub fn rows_to_image(self, pix: Rc<Vec<u32>>, h: usize, w: usize) -> Var<'t> {
        let tape = self.tape;
        let x_id = self.id;
        let v = tape.with_value(x_id, |xv| {
            let x = xv.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            let c = x.shape()[1];
            let mut out = Array3::<f64>::zeros((c, h, w));
            for (p, &k) in pix.iter().enumerate() {
                let (y, xq) = ((k as usize) / w, (k as usize) % w);
                for ci in 0..c {
                    out[[ci, y, xq]] += x[[p, ci]];
                }
            }
            out.into_dyn()
        });
        let pix_b = pix.clone();
        let wants = tape.wants_any(&[x_id]);
        let id = tape.push_raw(
            v,
            wants,
            wants.then(|| -> Box<dyn Fn(&crate::tape::BackCtx, &Arr, &mut crate::tape::GradSink)> {
                Box::new(move |_ctx, g, sink| {
                    let g3 = as3(g);
                    let c = g3.shape()[0];
                    let gw = g3.shape()[2];
                    let mut dx = Array2::<f64>::zeros((pix_b.len(), c));
                    for (p, &k) in pix_b.iter().enumerate() {
                        let (y, xq) = ((k as usize) / gw, (k as usize) % gw);
                        for ci in 0..c {
                            dx[[p, ci]] = g3[[ci, y, xq]];
                        }
                    }
                    sink.add(x_id, dx.into_dyn());
                })
            }),
        );
        Var::from_raw(tape, id)
    }

    /// Flatten a (C,H,W) image to (H*W, C) rows, row index y*W+x.
    pub fn image_to_rows(self) -> Var<'t> {
        let tape = self.tape;
        let x_id = self.id;
        let v = tape.with_value(x_id, |xv| {
            let x = as3(xv);
            let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let mut out = Array2::<f64>::zeros((h * w, c));
            for ci in 0..c {
                for y in 0..h {
                    for xq in 0..w {
                        out[[y * w + xq, ci]] = x[[ci, y, xq]];
                    }
                }
            }
            out.into_dyn()
        });
        let shape = self.shape();
        let wants = tape.wants_any(&[x_id]);
        let id = tape.push_raw(
            v,
            wants,
            wants.then(|| -> Box<dyn Fn(&crate::tape::BackCtx, &Arr, &mut crate::tape::GradSink)> {
                Box::new(move |_ctx, g, sink| {
                    let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                    let (c, h, w) = (shape[0], shape[1], shape[2]);
                    let mut dx = Array3::<f64>::zeros((c, h, w));
                    for ci in 0..c {
                        for y in 0..h {
                            for xq in 0..w {
                                dx[[ci, y, xq]] = g2[[y * w + xq, ci]];
                            }
                        }
                    }
                    sink.add(x_id, dx.into_dyn());
                })
            }),
        );
        Var::from_raw(tape, id)
    }
}
