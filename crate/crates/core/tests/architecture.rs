//! Generator and discriminator forward passes against direct evaluation.

use ampgan::discriminators::{DiscriminatorEnsemble, EnsembleConfig};
use ampgan::generator::{Generator, GeneratorConfig};
use ampgan::nn::ParamStore;
use ampgan::tensor::Tensor;
use ampgan::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Overwrite every parameter with small deterministic values.
fn hand_set(store: &mut ParamStore<f64>) {
    for i in 0..store.len() {
        let positive = store.name(i).ends_with("magnitude");
        for (j, v) in store.get_mut(i).data_mut().iter_mut().enumerate() {
            let base = (((i * 7 + j * 5) % 13) as f64 - 6.0) / 8.0;
            *v = if positive { 0.5 + base.abs() } else { base };
        }
    }
}

fn param<'a>(store: &'a ParamStore<f64>, name: &str) -> &'a [f64] {
    store.get(store.index_of(name).unwrap_or_else(|| panic!("no {name}"))).data()
}

/// Kernel `(out, in, k)` rebuilt from magnitude and direction.
fn weight_normed(store: &ParamStore<f64>, prefix: &str) -> (Vec<f64>, Vec<f64>) {
    let v = param(store, &format!("{prefix}.direction"));
    let g = param(store, &format!("{prefix}.magnitude"));
    let width = v.len() / g.len();
    let w = v
        .chunks(width)
        .zip(g)
        .flat_map(|(row, &g)| {
            let n = row.iter().map(|a| a * a).sum::<f64>().sqrt();
            row.iter().map(move |a| g * a / n)
        })
        .collect();
    (w, param(store, &format!("{prefix}.bias")).to_vec())
}

/// `y[o][t] = b[o] + sum_i sum_k w[o][i][k] x[i][t*stride + k*dil - pad]`, zero outside.
fn conv(x: &[Vec<f64>], w: &[f64], b: &[f64], k: usize, stride: usize, dil: usize, pad_l: usize, pad_r: usize) -> Vec<Vec<f64>> {
    let cin = x.len();
    let len = x[0].len();
    let out_len = (len + pad_l + pad_r - dil * (k - 1) - 1) / stride + 1;
    (0..b.len())
        .map(|o| {
            (0..out_len)
                .map(|t| {
                    let mut acc = b[o];
                    for (i, xi) in x.iter().enumerate() {
                        for kk in 0..k {
                            let pos = (t * stride + kk * dil) as isize - pad_l as isize;
                            if pos >= 0 && (pos as usize) < len {
                                acc += w[(o * cin + i) * k + kk] * xi[pos as usize];
                            }
                        }
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

fn add(a: &mut [Vec<f64>], b: &[Vec<f64>]) {
    for (ra, rb) in a.iter_mut().zip(b) {
        for (p, q) in ra.iter_mut().zip(rb) {
            *p += q;
        }
    }
}

/// Layer-by-layer evaluation of a single-stack generator with kernel 3 and
/// dilations 1, 2, 4, ...
fn reference_generator(store: &ParamStore<f64>, layers: usize, x: &[f64]) -> Vec<f64> {
    let (w, b) = weight_normed(store, "gen.input");
    let mut h = conv(&[x.to_vec()], &w, &b, 1, 1, 1, 0, 0);
    let c = h.len();
    let mut skips = vec![vec![0.0; x.len()]; c];
    for l in 0..layers {
        let d = 1 << l;
        let (w, b) = weight_normed(store, &format!("gen.layer{l}.dilated"));
        let a = conv(&h, &w, &b, 3, 1, d, 2 * d, 0);
        let z: Vec<Vec<f64>> = (0..c)
            .map(|ch| {
                a[ch].iter()
                    .zip(&a[ch + c])
                    .map(|(p, q)| p.tanh() / (1.0 + (-q).exp()))
                    .collect()
            })
            .collect();
        let (w, b) = weight_normed(store, &format!("gen.layer{l}.skip"));
        add(&mut skips, &conv(&z, &w, &b, 1, 1, 1, 0, 0));
        let (w, b) = weight_normed(store, &format!("gen.layer{l}.residual"));
        add(&mut h, &conv(&z, &w, &b, 1, 1, 1, 0, 0));
    }
    let (w, b) = weight_normed(store, "gen.head");
    conv(&skips, &w, &b, 1, 1, 1, 0, 0).remove(0)
}

#[test]
fn micro_generator_impulse_response_matches_direct_evaluation() {
    let cfg = GeneratorConfig::micro(3, 2);
    assert_eq!(cfg.dilations(), [1, 2, 4]);
    let mut gen = Generator::<f64>::build(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    hand_set(gen.params_mut());
    let mut x = vec![0.0; 32];
    x[3] = 1.0;
    let got = gen.process(&x).unwrap();
    let want = reference_generator(gen.params(), 3, &x);
    assert_eq!(got.len(), 32);
    for (t, (a, b)) in got.iter().zip(&want).enumerate() {
        assert!((a - b).abs() <= 1e-10, "t={t}: {a} vs {b}");
    }
    // nothing before the impulse depends on it
    let silent = gen.process(&[0.0; 32]).unwrap();
    assert_eq!(&got[..3], &silent[..3]);
}

#[test]
fn weight_norm_collapse_preserves_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let gen = Generator::<f64>::build(&GeneratorConfig::default(), &mut rng).unwrap();
    let plain = gen.collapse_weight_norm();
    assert!(plain.params().iter().all(|(n, _)| !n.ends_with("magnitude")));
    let x: Vec<f64> = (0..4096).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (a, b) = (gen.process(&x).unwrap(), plain.process(&x).unwrap());
    let worst = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    assert!(worst <= 1e-9, "{worst}");
}

#[test]
fn delayed_input_gives_delayed_output_past_the_receptive_field() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let gen = Generator::<f32>::build(&GeneratorConfig::default(), &mut rng).unwrap();
    let rf = gen.receptive_field();
    let x: Vec<f32> = (0..8192).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let y = gen.process(&x).unwrap();
    for delta in [1, 37, 700] {
        let mut delayed = vec![0.0; delta];
        delayed.extend_from_slice(&x[..x.len() - delta]);
        let yd = gen.process(&delayed).unwrap();
        for t in delta + rf..x.len() {
            assert!((yd[t] - y[t - delta]).abs() <= 1e-6, "delta {delta} t {t}");
        }
    }
}

#[test]
fn chunked_rendering_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let gen = Generator::<f32>::build(&GeneratorConfig::default(), &mut rng).unwrap();
    let x: Vec<f32> = (0..441_000).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let whole = gen.process(&x).unwrap();
    for chunk in [65536, 1000, 441_000] {
        let parts = gen.process_chunked(&x, chunk).unwrap();
        assert!(
            parts.iter().zip(&whole).all(|(a, b)| a.to_bits() == b.to_bits()) && parts.len() == whole.len(),
            "chunk {chunk}"
        );
    }
}

/// Mirror index for the right-hand reflection pad.
fn reflect(i: usize, len: usize) -> usize {
    if i < len {
        i
    } else {
        2 * len - 2 - i
    }
}

/// The micro ensemble evaluated sub by sub with explicit loops. Each map is
/// returned flattened as `(column, height)`.
fn reference_micro_ensemble(d: &DiscriminatorEnsemble<f64>, x: &[f64]) -> Vec<Vec<f64>> {
    let p = d.params();
    let bufs = d.buffers();
    let leaky = |v: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        v.into_iter()
            .map(|r| r.into_iter().map(|a| if a < 0.0 { 0.1 * a } else { a }).collect())
            .collect()
    };
    let spectral = |prefix: &str| {
        let w = param(p, &format!("{prefix}.weight"));
        let u = bufs.get(bufs.index_of(&format!("{prefix}.sn_u")).unwrap()).data();
        let v = bufs.get(bufs.index_of(&format!("{prefix}.sn_v")).unwrap()).data();
        let width = v.len();
        let mut sigma = 0.0;
        for (o, uo) in u.iter().enumerate() {
            for (j, vj) in v.iter().enumerate() {
                sigma += uo * w[o * width + j] * vj;
            }
        }
        (w.iter().map(|a| a / sigma).collect::<Vec<_>>(), param(p, &format!("{prefix}.bias")).to_vec())
    };
    let mut maps = Vec::new();
    // msd1: raw input, spectral norm
    let (w0, b0) = spectral("disc.msd1.conv0");
    let (w1, b1) = spectral("disc.msd1.conv1");
    let h = leaky(conv(&[x.to_vec()], &w0, &b0, 5, 2, 1, 2, 2));
    maps.push(conv(&h, &w1, &b1, 3, 1, 1, 1, 1).remove(0));
    // msd2: x4 average pool, weight norm
    let pooled: Vec<f64> = x.chunks_exact(4).map(|c| c.iter().sum::<f64>() / 4.0).collect();
    let (w0, b0) = weight_normed(p, "disc.msd2.conv0");
    let (w1, b1) = weight_normed(p, "disc.msd2.conv1");
    let h = leaky(conv(&[pooled], &w0, &b0, 5, 2, 1, 2, 2));
    maps.push(conv(&h, &w1, &b1, 3, 1, 1, 1, 1).remove(0));
    for period in [2, 3, 5, 7, 11] {
        let height = x.len().div_ceil(period);
        let (w0, b0) = weight_normed(p, &format!("disc.mpd_p{period}.conv0"));
        let (w1, b1) = weight_normed(p, &format!("disc.mpd_p{period}.conv1"));
        let mut map = Vec::new();
        for c in 0..period {
            let column: Vec<f64> = (0..height).map(|r| x[reflect(r * period + c, x.len())]).collect();
            let h = leaky(conv(&[column], &w0, &b0, 5, 3, 1, 2, 2));
            map.extend(conv(&h, &w1, &b1, 1, 1, 1, 2, 2).remove(0));
        }
        maps.push(map);
    }
    maps
}

#[test]
fn micro_ensemble_matches_direct_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut d = DiscriminatorEnsemble::<f64>::build(&EnsembleConfig::micro(), &mut rng).unwrap();
    hand_set(d.params_mut());
    d.refresh_spectral();
    let x: Vec<f64> = (0..32).map(|i| ((i * 5 % 9) as f64 - 4.0) / 5.0).collect();
    let maps = d.forward(&Tensor::new(vec![1, 1, 32], x.clone())).unwrap();
    let want = reference_micro_ensemble(&d, &x);
    assert_eq!(maps.len(), 7);
    for (m, w) in maps.maps.iter().zip(&want) {
        assert_eq!(m.values.len(), w.len(), "{}", m.name);
        assert_eq!(m.shape.0 * m.shape.1, w.len(), "{}", m.name);
        for (a, b) in m.values.data().iter().zip(w) {
            assert!((a - b).abs() <= 1e-10, "{}: {a} vs {b}", m.name);
        }
    }
}

#[test]
fn short_inputs_name_the_failing_sub() {
    let cfg = EnsembleConfig::full();
    match cfg.map_shapes(1024) {
        Err(Error::Shape { component, .. }) => assert_eq!(component, "msd2"),
        other => panic!("{other:?}"),
    }
    let min = cfg.min_input_len();
    assert!(cfg.map_shapes(min).is_ok() && cfg.map_shapes(min - 1).is_err());
    let shapes = cfg.map_shapes(88200).unwrap();
    assert_eq!(shapes.len(), 7);
    for (&(h, w), p) in shapes[2..].iter().zip([2, 3, 5, 7, 11]) {
        assert_eq!(w, p);
        assert!(h > 0);
    }
}
