use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

/// 2-D DFT magnitude of one `h × w` plane, shifted so the zero frequency
/// sits at `(h/2, w/2)`.
pub fn fourier_spectrum(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    assert_eq!(plane.len(), h * w, "plane must hold h·w values");
    let mut planner = FftPlanner::<f64>::new();
    let mut buf: Vec<Complex<f64>> = plane.iter().map(|&v| Complex::new(v, 0.0)).collect();
    let row_fft = planner.plan_fft_forward(w);
    for row in buf.chunks_mut(w) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft_forward(h);
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = buf[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            buf[y * w + x] = col[y];
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = ((y + h / 2) % h, (x + w / 2) % w);
            out[sy * w + sx] = buf[y * w + x].norm();
        }
    }
    out
}

/// Mean of a centred spectrum over integer-radius annuli around the centre.
pub fn radial_profile(spectrum: &[f64], h: usize, w: usize) -> Vec<f64> {
    let (cy, cx) = ((h / 2) as f64, (w / 2) as f64);
    let max_r = (cy.min(cx)) as usize;
    let mut sums = vec![0.0; max_r + 1];
    let mut counts = vec![0usize; max_r + 1];
    for y in 0..h {
        for x in 0..w {
            let r = ((y as f64 - cy).hypot(x as f64 - cx)).round() as usize;
            if r <= max_r {
                sums[r] += spectrum[y * w + x];
                counts[r] += 1;
            }
        }
    }
    sums.iter().zip(counts).map(|(s, c)| s / c.max(1) as f64).collect()
}
