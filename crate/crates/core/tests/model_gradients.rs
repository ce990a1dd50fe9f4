use cadaseg::model::{build_model, Architecture, ModelParams, TensorRole};
use cadaseg::DomainId;
use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random4(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize)) -> Array4<f64> {
    Array4::from_shape_simple_fn(shape, || rng.random::<f64>() - 0.5)
}

/// Scalar objective: a fixed linear functional of the probabilities plus one
/// of the embeddings of the first `k` samples.
fn objective(m: &ModelParams, x: &Array4<f64>, d: DomainId, r: &Array4<f64>, q: &Array2<f64>) -> f64 {
    let pass = m.segment_pass(x, d).unwrap();
    let k = q.nrows();
    let emb = m.head_pass(pass.encoder.bottleneck.slice(ndarray::s![..k, .., .., ..])).embeddings;
    (&pass.probs * r).sum() + (&emb * q).sum()
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let arch = Architecture {
        proj_hidden: 6,
        proj_dim: 5,
        ..Architecture::new(vec![3, 4, 5], 3)
    };
    let mut m = build_model(&arch, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    // non-trivial affine parameters in both domains
    m.visit_mut(&mut |_, role, v| {
        if let TensorRole::Affine(_) = role {
            v.iter_mut().for_each(|x| *x += 0.2 * (rng.random::<f64>() - 0.5));
        }
    });
    let x = random4(&mut rng, (3, 1, 8, 8));
    let r = random4(&mut rng, (3, 3, 8, 8));
    let q = Array2::from_shape_simple_fn((2, 5), || rng.random::<f64>() - 0.5);

    for domain in DomainId::ALL {
        let pass = m.segment_pass(&x, domain).unwrap();
        let mut grads = m.zeros_like();
        let hp = m.head_pass(pass.encoder.bottleneck.slice(ndarray::s![..2, .., .., ..]));
        let db = m.head_backward(&hp, &q, &mut grads);
        let db = ModelParams::pad_rows(&db, 3);
        m.segment_backward(&pass, &r, Some(&db), &mut grads);

        let mut analytic = Vec::new();
        grads.visit(&mut |name, role, _, v| {
            if role.trainable() {
                analytic.push((name.to_string(), v.to_vec()));
            }
        });
        let h = 1e-5;
        let mut checked = 0;
        for (name, g) in &analytic {
            // a handful of coordinates per tensor
            for idx in [0, g.len() / 2, g.len() - 1] {
                let eval = |delta: f64| {
                    let mut p = m.clone();
                    p.visit_mut(&mut |n, _, v| {
                        if n == name {
                            v[idx] += delta;
                        }
                    });
                    objective(&p, &x, domain, &r, &q)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let err = (fd - g[idx]).abs();
                assert!(
                    err <= 1e-5 + 1e-4 * fd.abs().max(g[idx].abs()),
                    "{domain} {name}[{idx}]: analytic {} vs numeric {fd}",
                    g[idx]
                );
                checked += 1;
            }
        }
        assert!(checked > 50);
        // the other domain's affine parameters receive nothing
        grads.visit(&mut |_, role, _, v| {
            if role == TensorRole::Affine(domain.other()) {
                assert!(v.iter().all(|&x| x == 0.0));
            }
        });
    }
}

#[test]
fn encoder_only_backward_matches_full_pass_head_gradient() {
    let arch = Architecture {
        proj_hidden: 4,
        proj_dim: 3,
        ..Architecture::new(vec![2, 4], 2)
    };
    let m = build_model(&arch, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random4(&mut rng, (2, 1, 4, 4));
    let q = Array2::from_shape_simple_fn((2, 3), || rng.random::<f64>());
    let pass = m.encoder_pass(&x, DomainId::Source).unwrap();
    let hp = m.head_pass(pass.bottleneck.view());
    let mut g = m.zeros_like();
    let db = m.head_backward(&hp, &q, &mut g);
    m.encoder_backward(&pass, db, &mut g);
    let name = "enc.0.conv1.weight";
    let mut analytic = 0.0;
    g.visit(&mut |n, _, _, v| {
        if n == name {
            analytic = v[0];
        }
    });
    let f = |delta: f64| {
        let mut p = m.clone();
        p.visit_mut(&mut |n, _, v| {
            if n == name {
                v[0] += delta;
            }
        });
        let e = p.head_pass(p.encoder_pass(&x, DomainId::Source).unwrap().bottleneck.view()).embeddings;
        (&e * &q).sum()
    };
    let fd = (f(1e-5) - f(-1e-5)) / 2e-5;
    assert!((fd - analytic).abs() < 1e-6 + 1e-4 * fd.abs(), "{analytic} vs {fd}");
}
