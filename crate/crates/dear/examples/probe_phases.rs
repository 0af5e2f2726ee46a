use std::sync::Arc;
use std::time::Instant;

use dear::channel::{DistortionConfig, IrSet};
use dear::grad::{Graph, Tensor};
use dear::net::{
    decoder_forward, discriminator_forward, embed_forward, fuse_watermark, ArchDescriptor,
    ModelBundle,
};
use dear::signal::Watermark;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let n = 16_384usize;
    let l = 16usize;
    let model = ModelBundle::new_random(ArchDescriptor::default(), l, n, 44_100, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ir_set = IrSet::synthetic(&mut rng, 4, 44_100).unwrap();
    let dist = DistortionConfig::new(44_100, ir_set).unwrap();
    let seg: Vec<f64> = (0..n)
        .map(|i| 0.3 * (2.0 * std::f64::consts::PI * 500.0 * i as f64 / 44_100.0).sin())
        .collect();
    let w = Watermark::random(l, &mut rng);

    // encoder forward only
    let t0 = Instant::now();
    let mut g = Graph::new();
    let enc_vars = model.encoder.to_vars(&mut g, true);
    let dec_vars = model.decoder.to_vars(&mut g, true);
    let disc_vars = model.discriminator.to_vars(&mut g, false);
    let audio = g.constant(Tensor::from_vec(1, n, seg.clone()).unwrap());
    let coeffs = g.dwt(audio).unwrap();
    let a_ac = g.slice_channels(coeffs, 0, 1).unwrap();
    let a_dc = g.slice_channels(coeffs, 1, 1).unwrap();
    let wc = g.constant(fuse_watermark(&w, n / 2).unwrap());
    let t_setup = t0.elapsed();

    let t1 = Instant::now();
    let a_ac_w = embed_forward(&mut g, &model.arch, &enc_vars, a_ac, wc, 1.0).unwrap();
    let t_enc = t1.elapsed();

    let t2 = Instant::now();
    let pair = g.concat_channels(a_ac_w, a_dc).unwrap();
    let marked = g.idwt(pair).unwrap();
    let attacked = dear::channel::dar(&mut g, marked, &dist, &mut rng).unwrap();
    let att_coeffs = g.dwt(attacked).unwrap();
    let att_ac = g.slice_channels(att_coeffs, 0, 1).unwrap();
    let t_dar = t2.elapsed();

    let t3 = Instant::now();
    let soft = decoder_forward(&mut g, &model.arch, &dec_vars, att_ac, l).unwrap();
    let t_dec = t3.elapsed();

    let t4 = Instant::now();
    let d_fake = discriminator_forward(&mut g, &model.arch, &disc_vars, a_ac_w).unwrap();
    let t_disc = t4.elapsed();

    let t5 = Instant::now();
    let target = g.constant(Tensor::from_vec(1, l, w.bits().iter().map(|&b| f64::from(b)).collect()).unwrap());
    let le = g.mse(a_ac, a_ac_w).unwrap();
    let lw = g.mse(target, soft).unwrap();
    let dcl = g.clamp(d_fake, 1e-6, 1.0 - 1e-6);
    let om = g.affine(dcl, -1.0, 1.0);
    let ld = g.log(om).unwrap();
    let le_s = g.mul_scalar(le, 150.0);
    let ld_s = g.mul_scalar(ld, 0.01);
    let lw_s = g.mul_scalar(lw, 1.0);
    let p = g.add(le_s, ld_s).unwrap();
    let total = g.add(p, lw_s).unwrap();
    let t_loss = t5.elapsed();

    let t6 = Instant::now();
    g.backward(total).unwrap();
    let t_back = t6.elapsed();

    println!("setup  {t_setup:?}");
    println!("enc    {t_enc:?}");
    println!("dar    {t_dar:?}");
    println!("dec    {t_dec:?}");
    println!("disc   {t_disc:?}");
    println!("loss   {t_loss:?}");
    println!("back   {t_back:?}");
    let _ = Arc::new(0);
}
