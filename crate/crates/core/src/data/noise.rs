use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

/// Fractal value noise sampled on an `height x width` grid, normalized to `[0, 1]`.
pub fn fractal_value_noise(height: usize, width: usize, seed: u64, base_cell: f32, octaves: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0.0f32; height * width];
    let mut amplitude = 1.0f32;
    let mut cell = base_cell.max(1.0);
    let mut total_amp = 0.0f32;
    for _ in 0..octaves.max(1) {
        let gh = (height as f32 / cell).ceil() as usize + 2;
        let gw = (width as f32 / cell).ceil() as usize + 2;
        let lattice: Vec<f32> = (0..gh * gw).map(|_| rng.gen::<f32>()).collect();
        for y in 0..height {
            let fy = y as f32 / cell;
            let y0 = fy.floor() as usize;
            let ty = smoothstep(fy - y0 as f32);
            for x in 0..width {
                let fx = x as f32 / cell;
                let x0 = fx.floor() as usize;
                let tx = smoothstep(fx - x0 as f32);
                let l = |yy: usize, xx: usize| lattice[yy * gw + xx];
                let top = l(y0, x0) * (1.0 - tx) + l(y0, x0 + 1) * tx;
                let bottom = l(y0 + 1, x0) * (1.0 - tx) + l(y0 + 1, x0 + 1) * tx;
                out[y * width + x] += amplitude * (top * (1.0 - ty) + bottom * ty);
            }
        }
        total_amp += amplitude;
        amplitude *= 0.5;
        cell *= 0.5;
    }
    for v in &mut out {
        *v /= total_amp;
    }
    out
}

#[inline]
fn smoothstep(t: f32) -> f32 {
    t * t * (3.0 - 2.0 * t)
}
