//! Pure numeric kernels behind the tape ops.
//!
//! Every kernel computes each output element with a fixed sequential
//! reduction order, so results are bitwise identical for a given input
//! regardless of the worker-thread count. Parallelism only ever splits
//! *disjoint output rows* across threads.

use std::sync::OnceLock;

fn worker_threads() -> usize {
    static THREADS: OnceLock<usize> = OnceLock::new();
    *THREADS.get_or_init(|| {
        if let Ok(v) = std::env::var("GENQ_THREADS") {
            if let Ok(n) = v.trim().parse::<usize>() {
                return n.clamp(1, 64);
            }
        }
        std::thread::available_parallelism()
            .map(|n| n.get().min(8))
            .unwrap_or(1)
    })
}

/// Run `work(row_start, rows_out)` over `rows` rows of `out`, each of width
/// `row_len`, splitting rows across threads when the job is large enough.
fn par_rows<F>(out: &mut [f32], rows: usize, row_len: usize, flops_per_row: usize, work: F)
where
    F: Fn(usize, &mut [f32]) + Sync + Send,
{
    let threads = worker_threads();
    if threads <= 1 || rows < 2 || rows * flops_per_row < 1 << 20 {
        work(0, &mut out[..rows * row_len]);
        return;
    }
    let threads = threads.min(rows);
    let chunk = rows.div_ceil(threads);
    let work = &work;
    std::thread::scope(|scope| {
        let mut rest = &mut out[..rows * row_len];
        let mut start = 0;
        while start < rows {
            let take = chunk.min(rows - start);
            let (head, tail) = rest.split_at_mut(take * row_len);
            let s = start;
            scope.spawn(move || work(s, head));
            rest = tail;
            start += take;
        }
    });
}

/// c[M,N] = a[M,K] · b[K,N]
pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; m * n];
    par_rows(&mut c, m, n, 2 * k * n, |row0, out| {
        for (ri, crow) in out.chunks_exact_mut(n).enumerate() {
            let i = row0 + ri;
            for kk in 0..k {
                let av = a[i * k + kk];
                if av == 0.0 {
                    continue;
                }
                let brow = &b[kk * n..kk * n + n];
                for (cv, bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    });
    c
}

/// Lane-split dot product: fixed accumulation order, vectorizable.
#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    const LANES: usize = 8;
    let mut acc = [0.0f32; LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        let base = c * LANES;
        for l in 0..LANES {
            acc[l] += a[base + l] * b[base + l];
        }
    }
    let mut tail = 0.0f32;
    for i in chunks * LANES..a.len() {
        tail += a[i] * b[i];
    }
    let mut s = 0.0f32;
    for l in 0..LANES {
        s += acc[l];
    }
    s + tail
}

/// c[M,N] = a[M,K] · b[N,K]ᵀ
pub fn matmul_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; m * n];
    par_rows(&mut c, m, n, 2 * k * n, |row0, out| {
        for (ri, crow) in out.chunks_exact_mut(n).enumerate() {
            let i = row0 + ri;
            let arow = &a[i * k..i * k + k];
            for (j, cv) in crow.iter_mut().enumerate() {
                *cv = dot(arow, &b[j * k..j * k + k]);
            }
        }
    });
    c
}

/// c[M,N] = a[K,M]ᵀ · b[K,N]
pub fn matmul_tn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; m * n];
    for kk in 0..k {
        let arow = &a[kk * m..kk * m + m];
        let brow = &b[kk * n..kk * n + n];
        for i in 0..m {
            let av = arow[i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..i * n + n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvMeta {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvMeta {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }
    fn col_rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }
}

/// Unfold one image `x[Ci,H,W]` into `cols[Ci·k·k, Ho·Wo]`.
fn im2col(x: &[f32], meta: &ConvMeta, cols: &mut [f32]) {
    let (oh, ow) = (meta.out_h(), meta.out_w());
    let (h, w, k, s, p) = (meta.in_h, meta.in_w, meta.kernel, meta.stride, meta.pad);
    cols.fill(0.0);
    for ci in 0..meta.in_ch {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    let dst = &mut cols[row + oy * ow..row + (oy + 1) * ow];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - p as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = plane[iy * w + ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Fold `cols[Ci·k·k, Ho·Wo]` back into an image gradient, accumulating.
fn col2im(cols: &[f32], meta: &ConvMeta, x: &mut [f32]) {
    let (oh, ow) = (meta.out_h(), meta.out_w());
    let (h, w, k, s, p) = (meta.in_h, meta.in_w, meta.kernel, meta.stride, meta.pad);
    for ci in 0..meta.in_ch {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    let src = &cols[row + oy * ow..row + (oy + 1) * ow];
                    for (ox, v) in src.iter().enumerate() {
                        let ix = (ox * s + kx) as isize - p as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[iy * w + ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution, `x[B,Ci,H,W] * w[Co,Ci,k,k] -> y[B,Co,Ho,Wo]`.
pub fn conv2d(x: &[f32], w: &[f32], meta: &ConvMeta) -> Vec<f32> {
    let (oh, ow) = (meta.out_h(), meta.out_w());
    let ckk = meta.col_rows();
    let per_img_in = meta.in_ch * meta.in_h * meta.in_w;
    let per_img_out = meta.out_ch * oh * ow;
    let mut y = vec![0.0f32; meta.batch * per_img_out];
    par_rows(
        &mut y,
        meta.batch,
        per_img_out,
        2 * meta.out_ch * ckk * oh * ow,
        |b0, out| {
            let mut cols = vec![0.0f32; ckk * oh * ow];
            for (bi, yimg) in out.chunks_exact_mut(per_img_out).enumerate() {
                let b = b0 + bi;
                im2col(&x[b * per_img_in..(b + 1) * per_img_in], meta, &mut cols);
                let prod = matmul_serial(w, &cols, meta.out_ch, ckk, oh * ow);
                yimg.copy_from_slice(&prod);
            }
        },
    );
    y
}

/// Single-threaded matmul used inside already-parallel regions.
fn matmul_serial(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..kk * n + n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// Backward convolution: gradients w.r.t. input and weights.
pub fn conv2d_backward(
    x: &[f32],
    w: &[f32],
    dy: &[f32],
    meta: &ConvMeta,
    want_dx: bool,
) -> (Option<Vec<f32>>, Vec<f32>) {
    let (oh, ow) = (meta.out_h(), meta.out_w());
    let ckk = meta.col_rows();
    let per_img_in = meta.in_ch * meta.in_h * meta.in_w;
    let per_img_out = meta.out_ch * oh * ow;
    let mut dw = vec![0.0f32; meta.out_ch * ckk];
    let mut dx = if want_dx {
        Some(vec![0.0f32; meta.batch * per_img_in])
    } else {
        None
    };
    let mut cols = vec![0.0f32; ckk * oh * ow];
    for b in 0..meta.batch {
        let dyb = &dy[b * per_img_out..(b + 1) * per_img_out];
        im2col(&x[b * per_img_in..(b + 1) * per_img_in], meta, &mut cols);
        // dW += dY_b · cols^T
        let contrib = matmul_nt(dyb, &cols, meta.out_ch, oh * ow, ckk);
        for (d, c) in dw.iter_mut().zip(&contrib) {
            *d += c;
        }
        if let Some(dx) = dx.as_mut() {
            // dcols = W^T · dY_b, then fold back
            let dcols = matmul_tn(w, dyb, ckk, meta.out_ch, oh * ow);
            col2im(&dcols, meta, &mut dx[b * per_img_in..(b + 1) * per_img_in]);
        }
    }
    (dx, dw)
}
