//! Monte Carlo functional Fisher information against a closed form, and the
//! alignment between two layers' information vectors.
//!
//!     cargo run --release --example fisher_information

use latent_lens::infotheory::{coordinate_info, info_alignment, layer_info, FnProbe, GaussianProbe, InfoTarget};
use ndarray::{Array1, Array2};

fn main() -> latent_lens::Result<()> {
    // h(z) = e^{a z_0}: I = a^2 e^{a mu + a^2 / 2}
    let a = 1.5;
    let h = FnProbe::new(3, move |p: ndarray::ArrayView1<f64>, c: usize| {
        let v = (a * p[0]).exp();
        (vec![v], vec![if c == 0 { a * v } else { 0.0 }])
    });
    for s in [100, 1_000, 10_000, 100_000] {
        let est = coordinate_info(&h, Array1::zeros(3).view(), 0, &GaussianProbe::new(s, 0)?)?;
        println!("S={s:>6}: {est:.4} (exact {:.4})", a * a * (a * a / 2.0).exp());
    }

    // two functions sensitive to different coordinates
    let f = FnProbe::new(3, |p: ndarray::ArrayView1<f64>, c: usize| {
        let v = 1.0 + p[1] * p[1];
        (vec![v], vec![if c == 1 { 2.0 * p[1] } else { 0.0 }])
    });
    let centers = Array2::from_shape_fn((4, 3), |(i, j)| 0.25 * (i + j) as f64);
    let probe = GaussianProbe::new(256, 1)?;
    let ig = layer_info(&h, centers.view(), &probe, InfoTarget::Generator)?;
    let if_ = layer_info(&f, centers.view(), &probe, InfoTarget::Head)?;
    println!("I_g = {:.3?}", ig.values);
    println!("I_f = {:.3?}", if_.values);
    println!("alignment = {:.3}", info_alignment(&ig, &if_)?);
    Ok(())
}
