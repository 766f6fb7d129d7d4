//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line (run with `cargo test --test acceptance -- --nocapture`).

use fmrnet::cmfm::{self, MemoryBank};
use fmrnet::gfrm;
use fmrnet::imaging::{Colorspace, Image};
use fmrnet::inspection::{self, InspectionConfig};
use fmrnet::networks::{self, ArchConfig, ForwardCtx, RunMode};
use fmrnet::pipeline::{self, InferencePayload};
use fmrnet::smoke::{run_smoke, SmokeReport};
use fmrnet::synth::{composite, DefectMode, SyntheticDefectSpec};
use fmrnet::tensor::{Tape, TensorId};
use fmrnet::training::{self, LossWeights, Model, TrainCorpus, Trainer, TrainingSchedule};
use ndarray::{Array1, Array2, Array3, ArrayD, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::sync::OnceLock;

fn report(criterion: usize, desc: &str, pass: bool) {
    println!("[{}] criterion {criterion}: {desc}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {criterion} failed: {desc}");
}

fn rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

fn rand_arr(shape: &[usize], seed: u64) -> ArrayD<f64> {
    let mut r = rng(seed);
    ArrayD::from_shape_fn(IxDyn(shape), |_| r.random_range(-1.0..1.0))
}

/// Central finite differences of a scalar-graph builder at f64.
fn fd_gradcheck(
    inputs: &[ArrayD<f64>],
    tol: f64,
    build: impl Fn(&mut Tape<f64>, &[TensorId]) -> TensorId,
) -> bool {
    let eval = |xs: &[ArrayD<f64>]| -> f64 {
        let mut tape = Tape::new(false);
        let ids: Vec<TensorId> = xs.iter().map(|x| tape.leaf(x.clone(), false)).collect();
        let loss = build(&mut tape, &ids);
        tape.scalar(loss)
    };
    let mut tape = Tape::new(true);
    let ids: Vec<TensorId> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let loss = build(&mut tape, &ids);
    let grads = tape.backward(loss);
    let h = 1e-5;
    for (k, input) in inputs.iter().enumerate() {
        let g = grads
            .get(ids[k])
            .map(|g| g.as_standard_layout().into_owned())
            .unwrap_or_else(|| ArrayD::zeros(input.raw_dim()));
        for idx in 0..input.len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[k].as_slice_mut().unwrap()[idx] += h;
            minus[k].as_slice_mut().unwrap()[idx] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let an = g.as_slice().unwrap()[idx];
            let denom = an.abs().max(fd.abs()).max(1e-6);
            if (an - fd).abs() / denom > tol {
                eprintln!("grad mismatch input {k} elem {idx}: analytic {an} vs fd {fd}");
                return false;
            }
        }
    }
    true
}

// ---------------------------------------------------------------------------
// Criterion 1: equation oracles.
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_equation_oracles() {
    let mut ok = true;
    let mut r = rng(101);

    // Compositing vs a direct per-pixel loop, several lambdas.
    for _ in 0..5 {
        let h = 9;
        let w = 7;
        let io = Image::new(
            Array3::from_shape_fn((h, w, 1), |_| r.random_range(0.0f32..1.0)),
            Colorspace::Grayscale,
        )
        .unwrap();
        let id = Image::new(
            Array3::from_shape_fn((h, w, 1), |_| r.random_range(0.0f32..1.0)),
            Colorspace::Grayscale,
        )
        .unwrap();
        let mask = Array2::from_shape_fn((h, w), |_| r.random::<f32>() < 0.4);
        let lam: f32 = r.random_range(0.1..1.0);
        let out = composite(
            &io,
            &SyntheticDefectSpec {
                lambda: lam,
                mask: mask.clone(),
                anomaly_source: id.clone(),
                mode: DefectMode::Occlusion,
            },
        )
        .unwrap();
        for i in 0..h {
            for j in 0..w {
                let m = if mask[[i, j]] { 1.0f64 } else { 0.0 };
                let io_v = io.pixels()[[i, j, 0]] as f64;
                let id_v = id.pixels()[[i, j, 0]] as f64;
                let want = (lam as f64 * ((1.0 - m) * io_v + m * id_v)
                    + (1.0 - lam as f64) * id_v)
                    .clamp(0.0, 1.0);
                if (out.pixels()[[i, j, 0]] as f64 - want).abs() > 1e-6 {
                    ok = false;
                }
            }
        }
    }

    // Binary cross entropy convention: mean over the two classifications.
    for _ in 0..20 {
        let p: f64 = r.random_range(0.02..0.98);
        let q: f64 = r.random_range(0.02..0.98);
        let latents: Array2<f64> = Array2::zeros((1, 3));
        let got = cmfm::latent_loss_value(
            &latents,
            &latents.clone(),
            &Array1::from(vec![p]),
            &Array1::from(vec![q]),
        )
        .unwrap();
        let want = -0.5 * (p.ln() + (1.0 - q).ln());
        if (got - want).abs() > 1e-9 {
            ok = false;
        }
    }

    // Memory substitution vs the explicit weighted sum.
    for trial in 0..10 {
        let entries = Array2::from_shape_fn((6, 5), |_| r.random_range(-1.0f64..1.0));
        let bank = MemoryBank::from_entries(entries.clone(), trial);
        let mut q: Vec<f64> = (0..6).map(|_| r.random_range(0.0..1.0)).collect();
        let s: f64 = q.iter().sum();
        q.iter_mut().for_each(|v| *v /= s);
        let q = Array1::from(q);
        let z = cmfm::substitute(&q, &bank).unwrap();
        for j in 0..5 {
            let want: f64 = (0..6).map(|i| q[i] * entries[[i, j]]).sum();
            if (z[j] - want).abs() > 1e-9 {
                ok = false;
            }
        }
    }

    // GMS / SSIM / residual / fusion maps vs brute-force loops.
    let reflect = |idx: isize, n: usize| -> usize {
        let period = 2 * (n as isize - 1);
        let mut i = idx.rem_euclid(period.max(1));
        if i >= n as isize {
            i = period - i;
        }
        i as usize
    };
    let prewitt_mag = |img: &Array2<f64>| -> Array2<f64> {
        let (h, w) = img.dim();
        Array2::from_shape_fn((h, w), |(i, j)| {
            let mut gx = 0.0;
            let mut gy = 0.0;
            for di in -1isize..=1 {
                for dj in -1isize..=1 {
                    let v = img[[reflect(i as isize + di, h), reflect(j as isize + dj, w)]];
                    gx += dj as f64 * v;
                    gy += di as f64 * v;
                }
            }
            (gx * gx + gy * gy).sqrt()
        })
    };
    for seed in 0..3u64 {
        let mut rr = rng(200 + seed);
        let a = Array2::from_shape_fn((16, 16), |_| rr.random_range(0.0f32..1.0));
        let b = Array2::from_shape_fn((16, 16), |_| rr.random_range(0.0f32..1.0));
        let a64 = a.mapv(|v| v as f64);
        let b64 = b.mapv(|v| v as f64);

        let ga = prewitt_mag(&a64);
        let gb = prewitt_mag(&b64);
        let c0 = 1e-4;
        let gms = inspection::gms_map(&a, &b, c0).unwrap();
        let am1 = inspection::anomaly_m1(&a, &b, c0).unwrap();
        for i in 0..16 {
            for j in 0..16 {
                let want = (2.0 * ga[[i, j]] * gb[[i, j]] + c0)
                    / (ga[[i, j]].powi(2) + gb[[i, j]].powi(2) + c0);
                if (gms[[i, j]] as f64 - want).abs() > 1e-6 {
                    ok = false;
                }
                if (am1[[i, j]] as f64 - (1.0 - want)).abs() > 1e-6 {
                    ok = false;
                }
            }
        }

        for strict in [false, true] {
            let cfg = InspectionConfig {
                ssim_window: 7,
                strict_sigma_product: strict,
                ..InspectionConfig::default()
            };
            let ssim = inspection::ssim_map(&a, &b, &cfg).unwrap();
            // Direct windowed reference.
            let half = 3isize;
            let mut weights = Vec::new();
            let mut wsum = 0.0;
            for di in -half..=half {
                for dj in -half..=half {
                    let wv = (-((di * di + dj * dj) as f64)
                        / (2.0 * cfg.ssim_sigma * cfg.ssim_sigma))
                        .exp();
                    weights.push(wv);
                    wsum += wv;
                }
            }
            for wv in &mut weights {
                *wv /= wsum;
            }
            for i in 0..16usize {
                for j in 0..16usize {
                    let mut mx = 0.0;
                    let mut my = 0.0;
                    let mut xx = 0.0;
                    let mut yy = 0.0;
                    let mut xy = 0.0;
                    let mut t = 0;
                    for di in -half..=half {
                        for dj in -half..=half {
                            let xi = a64[[reflect(i as isize + di, 16), reflect(j as isize + dj, 16)]];
                            let yi = b64[[reflect(i as isize + di, 16), reflect(j as isize + dj, 16)]];
                            mx += weights[t] * xi;
                            my += weights[t] * yi;
                            xx += weights[t] * xi * xi;
                            yy += weights[t] * yi * yi;
                            xy += weights[t] * xi * yi;
                            t += 1;
                        }
                    }
                    let vx = (xx - mx * mx).max(0.0);
                    let vy = (yy - my * my).max(0.0);
                    let lum = (2.0 * mx * my + cfg.c1) / (mx * mx + my * my + cfg.c1);
                    let st = if strict {
                        (2.0 * vx.sqrt() * vy.sqrt() + cfg.c2) / (vx + vy + cfg.c2)
                    } else {
                        (2.0 * (xy - mx * my) + cfg.c2) / (vx + vy + cfg.c2)
                    };
                    if (ssim[[i, j]] as f64 - lum * st).abs() > 1e-6 {
                        ok = false;
                    }
                }
            }
        }

        let res = inspection::residual_map(&a, &b).unwrap();
        for (got, (x, y)) in res.iter().zip(a.iter().zip(b.iter())) {
            if (*got as f64 - (*x as f64 - *y as f64).abs()).abs() > 1e-9 {
                ok = false;
            }
        }

        // Fusion: raw elementwise product of the three modality maps.
        let raw = InspectionConfig {
            apply_median: false,
            normalize_maps: false,
            ..InspectionConfig::default()
        };
        let m3 = res.clone();
        let fused = inspection::fuse(&am1, &gms, &m3, &raw).unwrap().fused;
        for idx in 0..fused.len() {
            let want = am1.as_slice().unwrap()[idx] as f64
                * gms.as_slice().unwrap()[idx] as f64
                * m3.as_slice().unwrap()[idx] as f64;
            if (fused.as_slice().unwrap()[idx] as f64 - want).abs() > 1e-6 {
                ok = false;
            }
        }
    }

    report(1, "equation implementations match brute-force oracles", ok);
}

// ---------------------------------------------------------------------------
// Criterion 2: analytic gradients vs central finite differences (f64).
// ---------------------------------------------------------------------------

#[test]
fn criterion_2_gradient_suite() {
    let mut ok = true;

    // Triplet latent loss through a 2-layer classifier, gradients w.r.t.
    // R0, R+, R- and the classifier parameters.
    let r0 = rand_arr(&[2, 6], 301);
    let rp = rand_arr(&[2, 6], 302);
    let rm = rand_arr(&[2, 6], 303);
    let w1 = rand_arr(&[6, 4], 304);
    let b1 = rand_arr(&[4], 305);
    let w2 = rand_arr(&[4, 1], 306);
    let b2 = rand_arr(&[1], 307);
    ok &= fd_gradcheck(&[r0, rp, rm, w1, b1, w2, b2], 1e-4, |t, ids| {
        let classify = |t: &mut Tape<f64>, z: TensorId, ids: &[TensorId]| {
            let h = t.matmul(z, ids[3]);
            let h = t.add_bias_cols(h, ids[4]);
            let h = t.leaky_relu(h, 0.2);
            let l = t.matmul(h, ids[5]);
            t.add_bias_cols(l, ids[6])
        };
        let lp = classify(t, ids[1], ids);
        let lm = classify(t, ids[2], ids);
        cmfm::latent_loss_batch(t, ids[0], ids[1], lp, lm)
    });

    // Reconstruction loss with the Frobenius weight penalty.
    let recon = rand_arr(&[1, 2, 4, 4], 311);
    let target = rand_arr(&[1, 2, 4, 4], 312);
    let wreg = rand_arr(&[3, 3], 313);
    ok &= fd_gradcheck(&[recon, target, wreg], 1e-4, |t, ids| {
        training::loss_rec(t, ids[0], ids[1], &[ids[2]], 0.7)
    });

    // Perceptual loss through a one-block convolutional feature extractor.
    let x_fake = rand_arr(&[1, 2, 4, 4], 321);
    let x_real = rand_arr(&[1, 2, 4, 4], 322);
    let wconv = rand_arr(&[3, 2, 4, 4], 323);
    let bconv = rand_arr(&[3], 324);
    ok &= fd_gradcheck(&[x_fake, x_real, wconv, bconv], 1e-4, |t, ids| {
        let feats = |t: &mut Tape<f64>, x: TensorId, ids: &[TensorId]| {
            let c = t.conv2d(x, ids[2], ids[3], 2, 1);
            t.leaky_relu(c, 0.2)
        };
        let ff = feats(t, ids[0], ids);
        let fr = feats(t, ids[1], ids);
        training::loss_perceptual(t, &[(1, fr)], &[(1, ff)], 0.5)
    });

    // Full rearrangement path: cosine similarity, softmax, smoothing,
    // texton reassembly; gradients w.r.t. both the skip map and the
    // memory-generated map.
    let skip = rand_arr(&[2, 4, 4], 331);
    let mem = rand_arr(&[2, 4, 4], 332);
    let probe = rand_arr(&[2, 4, 4], 333);
    ok &= fd_gradcheck(&[skip, mem], 1e-4, move |t, ids| {
        let kern = t.constant(ArrayD::from_elem(IxDyn(&[3, 3]), 1.0 / 9.0));
        let g = gfrm::gfrm_graph(t, ids[0], ids[1], 2, kern, true);
        let p = t.constant(probe.clone());
        let gp = t.mul(g, p);
        t.sum_all(gp)
    });

    report(2, "analytic gradients match central finite differences at float64", ok);
}

// ---------------------------------------------------------------------------
// Criterion 3: memory-module properties.
// ---------------------------------------------------------------------------

#[test]
fn criterion_3_cmfm_properties() {
    let mut ok = true;
    let mut r = rng(401);

    // Affinity queries from the addressing network are simplex vectors.
    let cfg = ArchConfig::desk();
    let store = networks::init_params::<f32>(&cfg, 11).unwrap();
    let mut tape = Tape::new(false);
    let mut ctx = ForwardCtx::new(&store, &[], RunMode::Eval);
    let z = tape.leaf(
        ArrayD::from_shape_fn(IxDyn(&[5, cfg.latent_dim()]), |_| r.random_range(-1.0f32..1.0)),
        false,
    );
    let q = networks::addressing(&mut tape, &mut ctx, &cfg, z);
    for row in fmrnet::tensor::to2(tape.value(q)).rows() {
        let sum: f32 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || row.iter().any(|&v| v < 0.0) {
            ok = false;
        }
        if row.len() != cfg.memory_entries {
            ok = false;
        }
    }

    // Convex-hull bounds and one-hot exactness of substitution.
    let entries = Array2::from_shape_fn((8, 5), |_| r.random_range(-2.0f64..2.0));
    let bank = MemoryBank::from_entries(entries.clone(), 0);
    for _ in 0..20 {
        let mut qv: Vec<f64> = (0..8).map(|_| r.random_range(0.0..1.0)).collect();
        let s: f64 = qv.iter().sum();
        qv.iter_mut().for_each(|v| *v /= s);
        let z = cmfm::substitute(&Array1::from(qv), &bank).unwrap();
        for j in 0..5 {
            let col: Vec<f64> = entries.column(j).to_vec();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if z[j] < lo - 1e-12 || z[j] > hi + 1e-12 {
                ok = false;
            }
        }
    }
    for pick in 0..8 {
        let mut onehot = vec![0.0f64; 8];
        onehot[pick] = 1.0;
        let z = cmfm::substitute(&Array1::from(onehot), &bank).unwrap();
        for j in 0..5 {
            if z[j] != entries[[pick, j]] {
                ok = false;
            }
        }
    }

    // Patch score equals brute-force nearest neighbor.
    for _ in 0..30 {
        let z = Array1::from_shape_fn(5, |_| r.random_range(-2.0f64..2.0));
        let got = cmfm::patch_anomaly_score(z.view(), &bank).unwrap();
        let want = entries
            .rows()
            .into_iter()
            .map(|row| {
                z.iter().zip(row.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
            })
            .fold(f64::INFINITY, f64::min);
        if (got - want).abs() > 1e-9 * want.max(1.0) {
            ok = false;
        }
    }

    // k-means recovers three well-separated clusters within 0.05.
    let centers: [[f64; 2]; 3] = [[0.0, 0.0], [6.0, 5.0], [-5.0, 4.0]];
    let data = Array2::from_shape_fn((300, 2), |(i, j)| {
        centers[i % 3][j] + r.random_range(-0.02..0.02)
    });
    let centroids = cmfm::kmeans(&data, 3, 1, 100).unwrap();
    for c in centers {
        let found = centroids
            .rows()
            .into_iter()
            .any(|row| ((row[0] - c[0]).powi(2) + (row[1] - c[1]).powi(2)).sqrt() < 0.05);
        if !found {
            ok = false;
        }
    }

    report(3, "memory-module properties (simplex, hull, one-hot, NN, k-means)", ok);
}

// ---------------------------------------------------------------------------
// Criterion 4: rearrangement-module properties.
// ---------------------------------------------------------------------------

#[test]
fn criterion_4_gfrm_properties() {
    let mut ok = true;
    let mut r = rng(501);

    // Similarity normalization at every location.
    let f_mem = Array3::from_shape_fn((2, 8, 8), |_| r.random_range(-1.0f64..1.0));
    let f_skip = Array3::from_shape_fn((2, 8, 8), |_| r.random_range(-1.0f64..1.0));
    let bank = gfrm::decompose_textons(&f_mem, 2).unwrap();
    let stack = gfrm::similarity(&f_skip, &bank).unwrap();
    for row in stack.s.rows() {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || row.iter().any(|&v| v < 0.0) {
            ok = false;
        }
    }

    // Hard-assignment round trip reconstructs the map exactly.
    let f = Array3::from_shape_fn((2, 6, 6), |_| r.random_range(-1.0f64..1.0));
    let bank = gfrm::decompose_textons(&f, 2).unwrap();
    let soft = gfrm::similarity(&f, &bank).unwrap();
    let n = bank.len();
    let mut hard = Array2::<f64>::zeros((soft.s.nrows(), n));
    for (p, row) in soft.s.rows().into_iter().enumerate() {
        let best = (0..n).max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap()).unwrap();
        hard[[p, best]] = 1.0;
    }
    let g = gfrm::rearrange(&gfrm::SimilarityStack { s: hard, grid: soft.grid }, &bank).unwrap();
    let max_diff = g.iter().zip(f.iter()).map(|(a, b)| (a - b).abs()).fold(0.0f64, f64::max);
    if max_diff > 1e-6 {
        ok = false;
    }

    // Checkerboard simulation: normal textons tile the memory map; the skip
    // map carries one injected "defect" block. After rearrangement no output
    // block correlates best with the defect texton.
    let mut base = Array3::<f64>::zeros((1, 2, 2));
    base[[0, 0, 0]] = 1.0;
    base[[0, 1, 1]] = 0.8;
    let mut mem = Array3::<f64>::zeros((1, 10, 10));
    for gi in 0..5 {
        for gj in 0..5 {
            for ki in 0..2 {
                for kj in 0..2 {
                    mem[[0, gi * 2 + ki, gj * 2 + kj]] =
                        base[[0, ki, kj]] + r.random_range(-0.05..0.05);
                }
            }
        }
    }
    let mut skip = mem.clone();
    // Defect texton: orthogonal pattern (mass on the anti-diagonal).
    let mut defect = Array3::<f64>::zeros((1, 2, 2));
    defect[[0, 0, 1]] = 1.0;
    defect[[0, 1, 0]] = 0.9;
    for ki in 0..2 {
        for kj in 0..2 {
            skip[[0, 4 + ki, 4 + kj]] = defect[[0, ki, kj]];
        }
    }
    let g = gfrm::gfrm_forward(&skip, &mem, 2).unwrap();
    let cos = |a: &[f64], b: &[f64]| -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb).max(1e-12)
    };
    let bank_norm = gfrm::decompose_textons(&mem, 2).unwrap();
    let defect_vec = [defect[[0, 0, 0]], defect[[0, 0, 1]], defect[[0, 1, 0]], defect[[0, 1, 1]]];
    for gi in 0..5 {
        for gj in 0..5 {
            let block = [
                g[[0, gi * 2, gj * 2]],
                g[[0, gi * 2, gj * 2 + 1]],
                g[[0, gi * 2 + 1, gj * 2]],
                g[[0, gi * 2 + 1, gj * 2 + 1]],
            ];
            let c_defect = cos(&block, &defect_vec);
            let best_normal = (0..bank_norm.len())
                .map(|i| {
                    let t = bank_norm.texton(i);
                    let tv = [t[[0, 0, 0]], t[[0, 0, 1]], t[[0, 1, 0]], t[[0, 1, 1]]];
                    cos(&block, &tv)
                })
                .fold(f64::NEG_INFINITY, f64::max);
            if c_defect >= best_normal {
                ok = false;
            }
        }
    }

    report(4, "rearrangement properties (simplex, round trip, checkerboard)", ok);
}

// ---------------------------------------------------------------------------
// Criterion 5: two-phase update-set contract.
// ---------------------------------------------------------------------------

fn micro_arch(trainable_smoothing: bool) -> ArchConfig {
    ArchConfig {
        in_channels: 1,
        patch: 8,
        blocks: 2,
        base_channels: 4,
        max_channels: 64,
        ca_widths: vec![8, 1],
        an_hidden: 8,
        memory_entries: 4,
        gfrm_levels: vec![1],
        perceptual_blocks: vec![1, 2],
        gfrm_trainable_smoothing: trainable_smoothing,
        ..ArchConfig::full()
    }
}

fn micro_corpus() -> TrainCorpus {
    let images = (0..6)
        .map(|i| {
            Image::new(
                Array3::from_shape_fn((8, 8, 1), |(r, c, _)| {
                    0.5 + 0.3 * (((r + c + i) as f32) * 0.7).sin() * 0.5
                }),
                Colorspace::Grayscale,
            )
            .unwrap()
        })
        .collect();
    TrainCorpus {
        images,
        synth: fmrnet::synth::SynthConfig::default(),
        pool: fmrnet::synth::SourcePool::Procedural,
    }
}

#[test]
fn criterion_5_two_phase_contract() {
    let mut ok = true;
    for trainable in [false, true] {
        let corpus = micro_corpus();
        let model = Model::init(micro_arch(trainable), 42).unwrap();
        let sched = TrainingSchedule {
            t1: 3,
            t2: 3,
            batch_size: 4,
            seed: 42,
            log_every: 1,
            ..TrainingSchedule::default()
        };
        let mut trainer = Trainer::new(model, LossWeights::default(), sched);

        // Phase 1 must update {enc, dec, ca, dis} and leave {an} untouched.
        let before_an = trainer.model.store.digest(&["an."]);
        let before_enc = trainer.model.encoder_digest();
        let before_dec = trainer.model.store.digest(&["dec."]);
        let before_ca = trainer.model.store.digest(&["ca."]);
        let before_dis = trainer.model.store.digest(&["dis."]);
        let before_gfrm = trainer.model.store.digest(&["gfrm."]);
        trainer.train_phase1(&corpus).unwrap();
        ok &= before_an == trainer.model.store.digest(&["an."]);
        ok &= before_enc != trainer.model.encoder_digest();
        ok &= before_dec != trainer.model.store.digest(&["dec."]);
        ok &= before_ca != trainer.model.store.digest(&["ca."]);
        ok &= before_dis != trainer.model.store.digest(&["dis."]);
        if trainable {
            ok &= before_gfrm != trainer.model.store.digest(&["gfrm."]);
        } else {
            ok &= before_gfrm == trainer.model.store.digest(&["gfrm."]);
        }

        training::establish_memory(&mut trainer.model, &corpus, 0, 0.1).unwrap();

        // Phase 2 must update {dec, an, dis} and leave encoder, classifier
        // and memory bank bit-identical.
        let enc = trainer.model.encoder_digest();
        let bank = trainer.model.bank.as_ref().unwrap().digest();
        let ca = trainer.model.store.digest(&["ca."]);
        let dec = trainer.model.store.digest(&["dec."]);
        let an = trainer.model.store.digest(&["an."]);
        let dis = trainer.model.store.digest(&["dis."]);
        let gfrm_d = trainer.model.store.digest(&["gfrm."]);
        trainer.train_phase2(&corpus).unwrap();
        ok &= enc == trainer.model.encoder_digest();
        ok &= bank == trainer.model.bank.as_ref().unwrap().digest();
        ok &= ca == trainer.model.store.digest(&["ca."]);
        ok &= dec != trainer.model.store.digest(&["dec."]);
        ok &= an != trainer.model.store.digest(&["an."]);
        ok &= dis != trainer.model.store.digest(&["dis."]);
        if trainable {
            ok &= gfrm_d != trainer.model.store.digest(&["gfrm."]);
        }
    }
    report(5, "phase update sets honored; encoder and bank frozen in phase 2", ok);
}

// ---------------------------------------------------------------------------
// Criterion 6 + 8: desk-scale end-to-end smoke run (shared fixture).
// ---------------------------------------------------------------------------

fn smoke_result() -> &'static Result<SmokeReport, String> {
    static RESULT: OnceLock<Result<SmokeReport, String>> = OnceLock::new();
    RESULT.get_or_init(|| {
        let cfg = fmrnet::config::SmokeSection::default();
        let icfg = InspectionConfig::default();
        run_smoke(&cfg, &icfg, |msg| println!("[smoke] {msg}"))
            .map(|(report, _)| report)
            .map_err(|e| e.to_string())
    })
}

#[test]
fn criterion_6_desk_scale_end_to_end() {
    match smoke_result() {
        Ok(r) => {
            println!(
                "[smoke] pixel AUC {:.4}, patch AUC {:.4}, train {:.1}s, eval {:.1}s",
                r.pixel_auc, r.patch_auc, r.train_seconds, r.eval_seconds
            );
            let runtime_ok = r.train_seconds + r.eval_seconds <= 3600.0;
            report(
                6,
                "desk-scale smoke: pixel AUC >= 0.85, patch AUC >= 0.90, <= 60 min CPU",
                r.pixel_auc >= 0.85 && r.patch_auc >= 0.90 && runtime_ok,
            );
        }
        Err(e) => {
            report(6, &format!("smoke run failed: {e}"), false);
        }
    }
}

#[test]
fn criterion_8_multilevel_latency_ordering() {
    match smoke_result() {
        Ok(r) => {
            println!(
                "[smoke] mean patch {:.2} ms vs mean pixel {:.2} ms",
                r.mean_patch_ms, r.mean_pixel_ms
            );
            report(
                8,
                "patch-level latency < pixel-level latency on every smoke image",
                r.latency_ordering_holds,
            );
        }
        Err(e) => report(8, &format!("smoke run failed: {e}"), false),
    }
}

// ---------------------------------------------------------------------------
// Criterion 7: split-inference equivalence.
// ---------------------------------------------------------------------------

#[test]
fn criterion_7_split_equivalence() {
    let mut ok = true;
    let cfg = ArchConfig::desk();
    let mut model = Model::init(cfg, 77).unwrap();
    let mut r = rng(701);
    let entries = Array2::from_shape_fn((model.cfg.memory_entries, model.cfg.latent_dim()), |_| {
        r.random_range(-0.5f32..0.5)
    });
    model.bank = Some(MemoryBank::from_entries(entries, model.encoder_digest()));
    let icfg = InspectionConfig::default();

    for seed in 0..10u64 {
        let mut rr = rng(800 + seed);
        let img = Image::new(
            Array3::from_shape_fn((64, 64, 1), |_| rr.random_range(0.0f32..1.0)),
            Colorspace::Grayscale,
        )
        .unwrap();
        let mono = pipeline::infer_pixel(&model, &img, 32, 32, &icfg).unwrap();
        let bytes = pipeline::split_export(&model, &img, 32, 32).unwrap();

        // Round trip must be bit-identical.
        let art = pipeline::deserialize_interchange(&bytes).unwrap();
        if pipeline::serialize_interchange(&art) != bytes {
            ok = false;
        }

        let resumed = pipeline::split_resume(&model, &bytes, &icfg).unwrap();
        let (InferencePayload::Pixel { maps: a, .. }, InferencePayload::Pixel { maps: b, .. }) =
            (&mono.payload, &resumed.payload)
        else {
            ok = false;
            continue;
        };
        let max_diff = a
            .fused
            .iter()
            .zip(b.fused.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        if max_diff > 1e-6 {
            eprintln!("split diverged by {max_diff}");
            ok = false;
        }
    }

    // Fingerprint mismatch must be refused.
    let other = {
        let cfg = ArchConfig::desk();
        let mut m = Model::init(cfg, 78).unwrap();
        let entries =
            Array2::from_shape_fn((m.cfg.memory_entries, m.cfg.latent_dim()), |_| 0.1f32);
        m.bank = Some(MemoryBank::from_entries(entries, m.encoder_digest()));
        m
    };
    let img = Image::new(Array3::from_elem((64, 64, 1), 0.5), Colorspace::Grayscale).unwrap();
    let bytes = pipeline::split_export(&model, &img, 32, 32).unwrap();
    ok &= matches!(
        pipeline::split_resume(&other, &bytes, &icfg),
        Err(pipeline::PipelineError::FingerprintMismatch { .. })
    );

    report(7, "split execution equals monolithic; round trip exact; stale fingerprint refused", ok);
}

// ---------------------------------------------------------------------------
// Criterion 9: metric implementations.
// ---------------------------------------------------------------------------

#[test]
fn criterion_9_metrics() {
    let mut ok = true;
    let mut r = rng(901);

    // AUC vs the pairwise oracle on 50-element random sets.
    for _ in 0..5 {
        let scores: Vec<f64> = (0..50).map(|_| r.random_range(0.0..1.0)).collect();
        let labels: Vec<bool> = (0..50).map(|_| r.random::<f32>() < 0.5).collect();
        if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
            continue;
        }
        let got = inspection::auc_roc(&scores, &labels).unwrap();
        let mut wins = 0.0;
        let mut total = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            if !li {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj {
                    continue;
                }
                total += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
        if (got - wins / total).abs() > 1e-9 {
            ok = false;
        }
    }

    // Precision/recall/F1 hand cases.
    let truth = Array2::from_shape_fn((2, 4), |(i, _)| i == 0);
    let mut mask = Array2::from_elem((2, 4), false);
    mask[[0, 0]] = true;
    mask[[0, 1]] = true;
    mask[[1, 0]] = true;
    mask[[1, 1]] = true;
    let prf = inspection::prf(&mask, &truth).unwrap();
    ok &= (prf.precision - 0.5).abs() < 1e-12
        && (prf.recall - 0.5).abs() < 1e-12
        && (prf.f1 - 0.5).abs() < 1e-12;
    let perfect = inspection::prf(&truth, &truth).unwrap();
    ok &= perfect.precision == 1.0 && perfect.recall == 1.0 && perfect.f1 == 1.0;
    let empty = inspection::prf(&Array2::from_elem((2, 4), false), &truth).unwrap();
    ok &= empty.zero_division && empty.recall == 0.0;

    // k-sigma binarization is invariant under positive affine transforms.
    for _ in 0..5 {
        let map = Array2::from_shape_fn((12, 12), |_| r.random_range(0.0f32..1.0));
        let a: f32 = r.random_range(0.5..4.0);
        let b: f32 = r.random_range(-1.0..1.0);
        let scaled = map.mapv(|v| a * v + b);
        if inspection::binarize_ksigma(&map, 2.5) != inspection::binarize_ksigma(&scaled, 2.5) {
            ok = false;
        }
    }

    report(9, "metrics match oracles (pairwise AUC, PRF hand cases, k-sigma affine invariance)", ok);
}
