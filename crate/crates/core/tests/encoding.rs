use ndarray::{Array1, Array2, Axis};
use ndarray_linalg::QR;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use spikeann::encoding::{
    center_normalize, encode_key, encode_normalized, excess_kurtosis, fit_encoding, FitParams, RawDataset,
};

fn laplace(rng: &mut impl Rng) -> f64 {
    let u: f64 = rng.gen_range(-0.5..0.5);
    -u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

fn random_orthogonal(n: usize, rng: &mut impl Rng) -> Array2<f64> {
    let g = Array2::from_shape_fn((n, n), |_| rng.sample::<f64, _>(StandardNormal));
    g.qr().unwrap().0
}

/// `m` samples of `n` independent unit Laplacian sources mixed by `mixing`.
fn laplacian_mixture(m: usize, mixing: &Array2<f64>, rng: &mut impl Rng) -> RawDataset {
    let n = mixing.nrows();
    let s = Array2::from_shape_fn((m, n), |_| laplace(rng));
    RawDataset::new(s.dot(&mixing.t()).mapv(|v| v as f32)).unwrap()
}

#[test]
fn recovers_rotation_of_two_laplacian_sources() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let angle = 0.6f64;
    let r = ndarray::array![[angle.cos(), -angle.sin()], [angle.sin(), angle.cos()]];
    let x = laplacian_mixture(20_000, &r, &mut rng);
    let model = fit_encoding(&x, &FitParams::new(2)).unwrap();
    let cr = model.c().mapv(|v| v as f64).dot(&r);
    for row in cr.rows() {
        let best = row.iter().fold(0f64, |m, v| m.max(v.abs()));
        assert!(best >= 0.99, "row {row:?}");
    }
}

#[test]
fn ica_coordinates_are_sparser_than_pca() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mixing = random_orthogonal(6, &mut rng);
    let x = laplacian_mixture(20_000, &mixing, &mut rng);
    let pca = fit_encoding(&x, &FitParams { skip_ica: true, ..FitParams::new(6) }).unwrap();
    let ica = fit_encoding(&x, &FitParams::new(6)).unwrap();
    let xd = x.data().mapv(|v| v as f64);
    let kurt = |c: &Array2<f32>| excess_kurtosis(c.mapv(|v| v as f64).dot(&xd.t()).view()).mean().unwrap();
    let (kp, ki) = (kurt(pca.c()), kurt(ica.c()));
    assert!(ki > kp, "ica {ki} pca {kp}");
    // Unit Laplacian sources have excess kurtosis 3.
    assert!(ki > 2.5, "{ki}");
}

#[test]
fn fitting_is_deterministic_under_a_seed() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mixing = random_orthogonal(5, &mut rng);
    let x = center_normalize(&laplacian_mixture(3_000, &mixing, &mut rng), None).unwrap();
    let a = fit_encoding(&x, &FitParams { seed: 4, ..FitParams::new(4) }).unwrap();
    let b = fit_encoding(&x, &FitParams { seed: 4, ..FitParams::new(4) }).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
}

#[test]
fn model_factors_are_orthonormal() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mixing = random_orthogonal(12, &mut rng);
    let x = center_normalize(&laplacian_mixture(5_000, &mixing, &mut rng), None).unwrap();
    let model = fit_encoding(&x, &FitParams::new(8)).unwrap();
    let v = model.v_pca().mapv(|v| v as f64);
    let m = model.m_ica().mapv(|v| v as f64);
    let vv = v.dot(&v.t()) - Array2::<f64>::eye(8);
    let mm = m.dot(&m.t()) - Array2::<f64>::eye(8);
    assert!(vv.iter().all(|e| e.abs() <= 1e-5));
    assert!(mm.iter().all(|e| e.abs() <= 1e-4));
}

#[test]
fn full_rank_encoding_preserves_dot_products() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let raw = RawDataset::new(Array2::from_shape_fn((400, 24), |_| rng.sample::<f32, _>(StandardNormal))).unwrap();
    let d = center_normalize(&raw, None).unwrap();
    let model = fit_encoding(&d, &FitParams::new(24)).unwrap();
    let e = encode_normalized(&model, d.data());
    for _ in 0..20 {
        let key = Array1::from_shape_fn(24, |_| rng.sample::<f32, _>(StandardNormal));
        let ek = encode_key(&model, key.view()).unwrap();
        let centered = &key - model.mean();
        let unit = &centered / centered.dot(&centered).sqrt();
        let exact = d.data().dot(&unit);
        let reduced = e.patterns().dot(&ek.view());
        let worst = exact.iter().zip(reduced.iter()).fold(0f32, |m, (a, b)| m.max((a - b).abs()));
        assert!(worst <= 1e-5, "{worst}");
    }
}

/// Image-like data: a 200-dimensional heavy-tailed signal embedded in 3072
/// dimensions plus weak isotropic noise.
#[test]
fn reduced_codes_keep_top1_of_high_dimensional_data() {
    let (n, latent, m) = (3072, 200, 10_000);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let g = Array2::from_shape_fn((n, latent), |_| rng.sample::<f64, _>(StandardNormal));
    let basis = g.qr().unwrap().0;
    let spectrum = Array1::from_shape_fn(latent, |i| (1.0 + i as f64 / 10.0).powf(-0.5));
    let sample = |rows: usize, rng: &mut ChaCha8Rng| {
        let s = Array2::from_shape_fn((rows, latent), |(_, j)| spectrum[j] * laplace(rng));
        let noise = Array2::from_shape_fn((rows, n), |_| 0.01 * rng.sample::<f64, _>(StandardNormal));
        RawDataset::new((s.dot(&basis.t()) + noise).mapv(|v| v as f32)).unwrap()
    };
    let raw = sample(m, &mut rng);
    let d = center_normalize(&raw, None).unwrap();
    let model = fit_encoding(&d, &FitParams::new(500)).unwrap();
    let e = encode_normalized(&model, d.data());
    let keys = sample(100, &mut rng);
    let mut agree = 0;
    for key in keys.data().axis_iter(Axis(0)) {
        let centered = &key - model.mean();
        let exact = d.data().dot(&centered);
        let reduced = e.patterns().dot(&encode_key(&model, key).unwrap().view());
        let argmax = |v: &Array1<f32>| v.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        agree += (argmax(&exact) == argmax(&reduced)) as usize;
    }
    assert!(agree >= 95, "{agree}/100");
}
