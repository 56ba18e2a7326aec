use dnfs_core::ctmc::BoundModel;
use dnfs_core::lenet::{LeNet, NetworkConfig, Variant};
use dnfs_core::oracle::ExactEnumeration;
use dnfs_core::path::{AnnealedPath, TimeGrid};
use dnfs_core::targets::make_ising;
use dnfs_core::tensor::{AdamW, ParamStore};
use dnfs_core::train::{train_loop, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

#[test]
fn probe_learning() {
    for lr in [1e-3] {
        let ising = make_ising(3, 0.1).unwrap();
        let path = AnnealedPath::linear(Arc::new(ising));
        let grid = TimeGrid::new(8).unwrap();
        let e = ExactEnumeration::new(&path).unwrap();
        let cfg = NetworkConfig { variant: Variant::LeTf, d: 9, s: 2, hidden: 64, layers: 2, heads: 2, time_dim: 32, max_dist: 8 };
        let net = LeNet::new(cfg).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        net.init_params(&mut store, &mut rng).unwrap();
        let tcfg = TrainConfig {
            outer_batch: 16, inner_batch: 8, inner_steps: 100, epochs: 20,
            optimizer: AdamW { lr, ..Default::default() }, seed: 7, ..Default::default()
        };
        // true quality probe: mean over states and times of (xi - exact dt log Z)^2
        let true_loss = |net: &LeNet, store: &ParamStore| -> f64 {
            let bound = BoundModel { net, store, bias: None };
            let mut acc = 0.0;
            let mut n = 0;
            for k in 0..grid.len() {
                let t = grid.time(k);
                let c = e.dt_log_z(&path, t);
                for idx in 0..e.num_states() {
                    let x = dnfs_core::targets::DiscreteState::from_index(idx, 9, 2);
                    let xi = dnfs_core::train::xi(&path, &bound, t, &x).unwrap();
                    acc += (xi - c) * (xi - c);
                    n += 1;
                }
            }
            acc / n as f64
        };
        println!("lr={lr}: true loss before {:.4}", true_loss(&net, &store));
        for stage in 0..6 {
            let res = train_loop(&net, &mut store, &path, &grid, &tcfg, None, None).unwrap();
            let rep: f64 = res.metrics.iter().rev().take(5).map(|m| m.loss).sum::<f64>() / 5.0;
            println!("lr={lr}: epochs {}: true {:.4} reported(last5) {:.4}", (stage+1)*20, true_loss(&net, &store), rep);
        }
    }
    panic!("debug");
}
