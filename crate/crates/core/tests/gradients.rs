mod support;

use promptcount::train::LossWeights;
use support::{fd_max_rel_error, grad_instance};

const INSTANCES: u64 = 20;
const TOL: f64 = 1e-4;

fn check(weights: LossWeights) {
    for seed in 0..INSTANCES {
        let inst = grad_instance(1000 + seed);
        let err = fd_max_rel_error(&inst, &weights, 1e-6);
        assert!(err <= TOL, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn point_loss_gradient() {
    check(LossWeights { point: 1.0, cls: 0.0, kd: 0.0 });
}

#[test]
fn cls_loss_gradient() {
    check(LossWeights { point: 0.0, cls: 1.0, kd: 0.0 });
}

#[test]
fn kd_loss_gradient() {
    check(LossWeights { point: 0.0, cls: 0.0, kd: 1.0 });
}

#[test]
fn joint_loss_gradient() {
    check(LossWeights { point: 0.7, cls: 1.3, kd: 0.9 });
}
