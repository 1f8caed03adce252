mod common;

use common::*;
use meshdse::neural::Mlp;
use meshdse::planner::{mpc_plan, MpcConfig, WorldModel};
use meshdse::surrogate::{SurrogateModel, NODE_ONE_HOT};
use rand::Rng;

#[test]
fn world_model_learns_linear_dynamics() {
    let (sd, ad) = (4, 2);
    let mut r = rng(11);
    let a_mat: Vec<f64> = (0..sd * sd).map(|_| uniform(&mut r, -0.2, 0.2)).collect();
    let b_mat: Vec<f64> = (0..ad * sd).map(|_| uniform(&mut r, -0.3, 0.3)).collect();
    let step = |s: &[f64], a: &[f64]| -> Vec<f64> {
        (0..sd)
            .map(|j| {
                s[j] + (0..sd).map(|i| a_mat[j * sd + i] * s[i]).sum::<f64>() + (0..ad).map(|i| b_mat[j * ad + i] * a[i]).sum::<f64>()
            })
            .collect()
    };
    let batch = |r: &mut rand_chacha::ChaCha8Rng, n: usize| {
        let s: Vec<f64> = (0..n * sd).map(|_| uniform(r, -1.0, 1.0)).collect();
        let a: Vec<f64> = (0..n * ad).map(|_| uniform(r, -1.0, 1.0)).collect();
        let s2: Vec<f64> = (0..n).flat_map(|i| step(&s[i * sd..(i + 1) * sd], &a[i * ad..(i + 1) * ad])).collect();
        (s, a, s2)
    };
    let mut wm = WorldModel::from_net(Mlp::<f64>::new(&[sd + ad, 32, 32, sd], &mut r), sd, ad);
    wm.set_lr(3e-3);
    let (ts, ta, ts2) = batch(&mut r, 256);
    let before = wm.loss_grad(&ts, &ta, &ts2).0;
    for _ in 0..3000 {
        let (s, a, s2) = batch(&mut r, 64);
        wm.train_step(&s, &a, &s2);
    }
    let after = wm.loss_grad(&ts, &ta, &ts2).0;
    assert!(after < 2e-4, "held-out Δs MSE {after:e} (before {before:e})");
    let pred = wm.predict(&ts[..sd], &ta[..ad]);
    for j in 0..sd {
        assert!((pred[j] - ts2[j]).abs() < 0.05);
    }
}

#[test]
fn surrogate_fits_smooth_targets() {
    let (sd, ad) = (5, 3);
    let mut r = rng(5);
    let mut sur = SurrogateModel::from_net(Mlp::<f64>::new(&[sd + ad + NODE_ONE_HOT, 32, 32, 3], &mut r), sd, ad);
    let truth = |s: &[f64], a: &[f64], node: usize| -> [f64; 3] {
        let z = s.iter().sum::<f64>() * 0.3 + a[0] * 0.5;
        [
            1.0 / (1.0 + (-z).exp()),
            0.5 + 0.3 * (a[1] * s[0]).tanh(),
            0.1 * node as f64 + 0.2 * a[2].abs(),
        ]
    };
    let batch = |r: &mut rand_chacha::ChaCha8Rng, sur: &SurrogateModel<f64>, n: usize| {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for _ in 0..n {
            let s: Vec<f64> = (0..sd).map(|_| uniform(r, -1.0, 1.0)).collect();
            let a: Vec<f64> = (0..ad).map(|_| uniform(r, -1.0, 1.0)).collect();
            let k = r.random_range(0..NODE_ONE_HOT);
            let mut node = [0.0; NODE_ONE_HOT];
            node[k] = 1.0;
            x.extend(sur.input(&s, &a, &node));
            y.push(truth(&s, &a, k));
        }
        (x, y)
    };
    let (tx, ty) = batch(&mut r, &sur, 256);
    for _ in 0..3000 {
        let (x, y) = batch(&mut r, &sur, 64);
        sur.train_step(&x, &y);
    }
    let mse = sur.loss_grad(&tx, &ty).0 / 3.0;
    assert!(mse.sqrt() < 0.05, "held-out RMSE {}", mse.sqrt());
}

/// Linear model `s' = s + 0.5 a` and reward `−‖s − t‖²`: with a zero base
/// policy the best first action is `2(t − s)`.
#[test]
fn mpc_finds_quadratic_optimum() {
    let (sd, ad) = (2, 2);
    let mut p = vec![0.0; (sd + ad) * sd + sd];
    p[2 * sd] = 0.5;
    p[3 * sd + 1] = 0.5;
    let net = Mlp::<f64>::from_params(&[sd + ad, sd], p).unwrap();
    assert_eq!(net.forward(&[0.3, 0.3, 1.0, -1.0]), vec![0.5, -0.5]);
    let wm = WorldModel::from_net(net, sd, ad);
    let (s, t) = ([0.5, 0.5], [0.8, 0.2]);
    let cfg = MpcConfig {
        candidates: 4096,
        horizon: 5,
        sigma: 0.6,
        gamma: 0.9,
        state_lo: -10.0,
        state_hi: 10.0,
    };
    let reward = |x: &[f64]| -((x[0] - t[0]).powi(2) + (x[1] - t[1]).powi(2));
    let policy = |_: &[f64], n: usize| vec![0.0; n * ad];
    let out = mpc_plan(&policy, &wm, &s, &cfg, &reward, &mut rng(2));
    let a = &out.action;
    assert!((a[0] - 0.6).abs() < 0.05 && (a[1] + 0.6).abs() < 0.05, "{a:?}");
    let s1 = [s[0] + 0.5 * a[0], s[1] + 0.5 * a[1]];
    let oracle: f64 = (0..5).map(|k| 0.9f64.powi(k) * reward(&s1)).sum();
    assert!((out.returns[out.best_index] - oracle).abs() < 1e-12);
    assert!(out.returns.iter().all(|&v| v <= out.returns[out.best_index]));
}
