use rayon::prelude::*;

use super::{numel, DiffTensor, Tape};
use crate::error::{KanoError, Result};

/// Rows per rayon task in the dense kernels.
const ROW_CHUNK: usize = 256;

fn common_tape(inputs: &[&DiffTensor]) -> Result<Option<Tape>> {
    let mut tape: Option<&Tape> = None;
    for t in inputs {
        if let Some(other) = t.tape() {
            match tape {
                None => tape = Some(other),
                Some(cur) if std::rc::Rc::ptr_eq(&cur.inner, &other.inner) => {}
                Some(_) => return Err(KanoError::contract("operands live on different tapes")),
            }
        }
    }
    Ok(tape.cloned())
}

/// Records `data` as the output of an op over `inputs`, or returns it detached
/// when no input is attached to a tape.
pub(crate) fn record(
    inputs: &[&DiffTensor],
    data: Vec<f64>,
    shape: &[usize],
    backward: impl Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>> + 'static,
) -> Result<DiffTensor> {
    match common_tape(inputs)? {
        None => Ok(DiffTensor::detached(data, shape)),
        Some(tape) => {
            let attached = inputs
                .iter()
                .map(|t| tape.attach(t))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&DiffTensor> = attached.iter().collect();
            Ok(tape.op(&refs, data, shape, Box::new(backward)))
        }
    }
}

fn same_shape(a: &DiffTensor, b: &DiffTensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(KanoError::contract(format!(
            "{what}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn dims2(t: &DiffTensor, what: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(KanoError::contract(format!(
            "{what}: expected a matrix, got shape {:?}",
            t.shape()
        ))),
    }
}

impl DiffTensor {
    pub fn add(&self, other: &DiffTensor) -> Result<DiffTensor> {
        same_shape(self, other, "add")?;
        let data = self.data.iter().zip(other.data.iter()).map(|(a, b)| a + b).collect();
        record(&[self, other], data, &self.shape.clone(), |g, _| {
            vec![Some(g.to_vec()), Some(g.to_vec())]
        })
    }

    pub fn sub(&self, other: &DiffTensor) -> Result<DiffTensor> {
        same_shape(self, other, "sub")?;
        let data = self.data.iter().zip(other.data.iter()).map(|(a, b)| a - b).collect();
        record(&[self, other], data, &self.shape.clone(), |g, _| {
            vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]
        })
    }

    /// Elementwise product.
    pub fn mul(&self, other: &DiffTensor) -> Result<DiffTensor> {
        same_shape(self, other, "mul")?;
        let data = self.data.iter().zip(other.data.iter()).map(|(a, b)| a * b).collect();
        let (a, b) = (self.data.clone(), other.data.clone());
        record(&[self, other], data, &self.shape.clone(), move |g, needs| {
            vec![
                needs[0].then(|| g.iter().zip(b.iter()).map(|(g, b)| g * b).collect()),
                needs[1].then(|| g.iter().zip(a.iter()).map(|(g, a)| g * a).collect()),
            ]
        })
    }

    pub fn scale(&self, c: f64) -> DiffTensor {
        let data = self.data.iter().map(|v| v * c).collect();
        record(&[self], data, &self.shape.clone(), move |g, _| {
            vec![Some(g.iter().map(|v| v * c).collect())]
        })
        .expect("single-input op")
    }

    pub fn add_scalar(&self, c: f64) -> DiffTensor {
        let data = self.data.iter().map(|v| v + c).collect();
        record(&[self], data, &self.shape.clone(), |g, _| vec![Some(g.to_vec())])
            .expect("single-input op")
    }

    pub fn square(&self) -> DiffTensor {
        let data = self.data.iter().map(|v| v * v).collect();
        let x = self.data.clone();
        record(&[self], data, &self.shape.clone(), move |g, _| {
            vec![Some(g.iter().zip(x.iter()).map(|(g, x)| 2.0 * g * x).collect())]
        })
        .expect("single-input op")
    }

    pub fn sum(&self) -> DiffTensor {
        let n = self.len();
        let s = self.data.iter().sum();
        record(&[self], vec![s], &[1], move |g, _| vec![Some(vec![g[0]; n])])
            .expect("single-input op")
    }

    pub fn mean(&self) -> DiffTensor {
        let n = self.len();
        let s = self.data.iter().sum::<f64>() / n as f64;
        record(&[self], vec![s], &[1], move |g, _| {
            vec![Some(vec![g[0] / n as f64; n])]
        })
        .expect("single-input op")
    }

    /// Mean squared deviation from a fixed target.
    pub fn mse(&self, target: &[f64]) -> Result<DiffTensor> {
        if target.len() != self.len() {
            return Err(KanoError::contract(format!(
                "mse: {} predictions vs {} targets",
                self.len(),
                target.len()
            )));
        }
        let n = self.len() as f64;
        let diff: Vec<f64> = self.data.iter().zip(target).map(|(p, t)| p - t).collect();
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
        record(&[self], vec![loss], &[1], move |g, _| {
            vec![Some(diff.iter().map(|d| 2.0 * g[0] * d / n).collect())]
        })
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<DiffTensor> {
        if numel(shape) != self.len() {
            return Err(KanoError::contract(format!(
                "reshape {:?} -> {:?} changes the element count",
                self.shape(),
                shape
            )));
        }
        record(&[self], self.to_vec(), shape, |g, _| vec![Some(g.to_vec())])
    }

    /// `x · wᵀ + b` for `x: [n, k]`, `w: [m, k]`, `b: [m]`.
    pub fn linear(&self, w: &DiffTensor, b: Option<&DiffTensor>) -> Result<DiffTensor> {
        let (n, k) = dims2(self, "linear input")?;
        let (m, kw) = dims2(w, "linear weight")?;
        if kw != k {
            return Err(KanoError::contract(format!(
                "linear: input width {k} vs weight width {kw}"
            )));
        }
        if let Some(b) = b {
            if b.len() != m {
                return Err(KanoError::contract(format!(
                    "linear: bias length {} vs output width {m}",
                    b.len()
                )));
            }
        }
        let x = self.data.clone();
        let wd = w.data.clone();
        let mut out = vec![0.0; n * m];
        let (xs, ws): (&[f64], &[f64]) = (&x, &wd);
        out.par_chunks_mut(ROW_CHUNK * m)
            .enumerate()
            .for_each(|(chunk, rows)| {
                for (ri, orow) in rows.chunks_mut(m).enumerate() {
                    let r = chunk * ROW_CHUNK + ri;
                    let xr = &xs[r * k..(r + 1) * k];
                    for (o, slot) in orow.iter_mut().enumerate() {
                        let wr = &ws[o * k..(o + 1) * k];
                        *slot = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
                    }
                }
            });
        if let Some(b) = b {
            let bd: &[f64] = &b.data;
            out.par_chunks_mut(m)
                .for_each(|row| row.iter_mut().zip(bd).for_each(|(v, b)| *v += b));
        }
        let mut inputs: Vec<&DiffTensor> = vec![self, w];
        if let Some(b) = b {
            inputs.push(b);
        }
        record(&inputs, out, &[n, m], move |g, needs| {
            let (x, wd): (&[f64], &[f64]) = (&x, &wd);
            let gx = needs[0].then(|| {
                let mut gx = vec![0.0; n * k];
                gx.par_chunks_mut(ROW_CHUNK * k)
                    .enumerate()
                    .for_each(|(chunk, rows)| {
                        for (ri, gxr) in rows.chunks_mut(k).enumerate() {
                            let r = chunk * ROW_CHUNK + ri;
                            for o in 0..m {
                                let go = g[r * m + o];
                                if go != 0.0 {
                                    let wr = &wd[o * k..(o + 1) * k];
                                    gxr.iter_mut().zip(wr).for_each(|(a, w)| *a += go * w);
                                }
                            }
                        }
                    });
                gx
            });
            let gw = needs[1].then(|| {
                let mut gw = vec![0.0; m * k];
                gw.par_chunks_mut(k).enumerate().for_each(|(o, gwr)| {
                    for r in 0..n {
                        let go = g[r * m + o];
                        if go != 0.0 {
                            let xr = &x[r * k..(r + 1) * k];
                            gwr.iter_mut().zip(xr).for_each(|(a, x)| *a += go * x);
                        }
                    }
                });
                gw
            });
            let mut res = vec![gx, gw];
            if needs.len() == 3 {
                res.push(needs[2].then(|| {
                    let mut gb = vec![0.0; m];
                    for row in g.chunks(m) {
                        gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                    gb
                }));
            }
            res
        })
    }

    /// Matrix product `[n, k] × [k, m]`.
    pub fn matmul(&self, other: &DiffTensor) -> Result<DiffTensor> {
        let (n, k) = dims2(self, "matmul lhs")?;
        let (k2, m) = dims2(other, "matmul rhs")?;
        if k != k2 {
            return Err(KanoError::contract(format!(
                "matmul: inner dimensions {k} vs {k2}"
            )));
        }
        let (a, b) = (self.data.clone(), other.data.clone());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for p in 0..k {
                let av = a[i * k + p];
                for j in 0..m {
                    out[i * m + j] += av * b[p * m + j];
                }
            }
        }
        record(&[self, other], out, &[n, m], move |g, needs| {
            let ga = needs[0].then(|| {
                let mut ga = vec![0.0; n * k];
                for i in 0..n {
                    for p in 0..k {
                        ga[i * k + p] = (0..m).map(|j| g[i * m + j] * b[p * m + j]).sum();
                    }
                }
                ga
            });
            let gb = needs[1].then(|| {
                let mut gb = vec![0.0; k * m];
                for p in 0..k {
                    for j in 0..m {
                        gb[p * m + j] = (0..n).map(|i| a[i * k + p] * g[i * m + j]).sum();
                    }
                }
                gb
            });
            vec![ga, gb]
        })
    }

    /// Rectangular diagonal map: `out[:, i] = gate[i] · x[:, i]` for
    /// `i < min(d_in, d_out)`, zero in the remaining output columns.
    pub fn diag_gate(&self, gate: &DiffTensor, d_out: usize) -> Result<DiffTensor> {
        let (n, d_in) = dims2(self, "diag_gate input")?;
        let k = d_in.min(d_out);
        if gate.len() != k {
            return Err(KanoError::contract(format!(
                "diag_gate: {} gate entries for a {d_out}x{d_in} diagonal",
                gate.len()
            )));
        }
        let x = self.data.clone();
        let gd = gate.data.clone();
        let mut out = vec![0.0; n * d_out];
        for r in 0..n {
            for i in 0..k {
                out[r * d_out + i] = gd[i] * x[r * d_in + i];
            }
        }
        record(&[self, gate], out, &[n, d_out], move |g, needs| {
            let gx = needs[0].then(|| {
                let mut gx = vec![0.0; n * d_in];
                for r in 0..n {
                    for i in 0..k {
                        gx[r * d_in + i] = gd[i] * g[r * d_out + i];
                    }
                }
                gx
            });
            let gg = needs[1].then(|| {
                let mut gg = vec![0.0; k];
                for r in 0..n {
                    for i in 0..k {
                        gg[i] += x[r * d_in + i] * g[r * d_out + i];
                    }
                }
                gg
            });
            vec![gx, gg]
        })
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(parts: &[&DiffTensor]) -> Result<DiffTensor> {
        let first = parts
            .first()
            .ok_or_else(|| KanoError::contract("concat_cols of nothing"))?;
        let (n, _) = dims2(first, "concat_cols")?;
        let widths = parts
            .iter()
            .map(|p| {
                let (r, c) = dims2(p, "concat_cols")?;
                if r != n {
                    return Err(KanoError::contract(format!(
                        "concat_cols: row counts {n} vs {r}"
                    )));
                }
                Ok(c)
            })
            .collect::<Result<Vec<usize>>>()?;
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; n * total];
        let mut offset = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            for r in 0..n {
                out[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&p.data[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let widths_bw = widths.clone();
        record(parts, out, &[n, total], move |g, needs| {
            let mut offset = 0;
            widths_bw
                .iter()
                .zip(needs)
                .map(|(&w, &need)| {
                    let start = offset;
                    offset += w;
                    need.then(|| {
                        let mut gp = vec![0.0; n * w];
                        for r in 0..n {
                            gp[r * w..(r + 1) * w]
                                .copy_from_slice(&g[r * total + start..r * total + start + w]);
                        }
                        gp
                    })
                })
                .collect()
        })
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<DiffTensor> {
        let (n, c) = dims2(self, "slice_cols")?;
        if start >= end || end > c {
            return Err(KanoError::contract(format!(
                "slice_cols {start}..{end} out of range for width {c}"
            )));
        }
        let w = end - start;
        let mut out = vec![0.0; n * w];
        for r in 0..n {
            out[r * w..(r + 1) * w].copy_from_slice(&self.data[r * c + start..r * c + end]);
        }
        record(&[self], out, &[n, w], move |g, _| {
            let mut gx = vec![0.0; n * c];
            for r in 0..n {
                gx[r * c + start..r * c + end].copy_from_slice(&g[r * w..(r + 1) * w]);
            }
            vec![Some(gx)]
        })
    }

    /// Stacks `times` copies of a matrix along the row axis.
    pub fn tile_rows(&self, times: usize) -> Result<DiffTensor> {
        let (n, c) = dims2(self, "tile_rows")?;
        if times == 0 {
            return Err(KanoError::contract("tile_rows: zero copies"));
        }
        let block = n * c;
        let mut out = Vec::with_capacity(block * times);
        for _ in 0..times {
            out.extend_from_slice(&self.data);
        }
        record(&[self], out, &[n * times, c], move |g, _| {
            let mut gx = vec![0.0; block];
            for chunk in g.chunks(block) {
                gx.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
            }
            vec![Some(gx)]
        })
    }
}
