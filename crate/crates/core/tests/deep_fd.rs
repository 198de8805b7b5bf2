mod common;

use common::{mae_fd, mae_teacher_adjoint_max, shallow_fd};
use rcmae_lab::deep_lab::Activation;

#[test]
fn tiny_mae_tape_gradient_matches_central_differences() {
    for seed in [1, 2] {
        let r = mae_fd(seed, 256, 1e-5, 1e-6);
        assert!(r.checked >= 200);
        assert!(r.worst <= 1e-4, "seed {seed}: worst relative error {:e}", r.worst);
    }
}

#[test]
fn shallow_hand_gradient_matches_central_differences() {
    for act in [Activation::Tanh, Activation::Gelu] {
        let r = shallow_fd(3, act, 1e-5, 1e-6);
        assert!(r.checked >= 200);
        assert!(r.worst <= 1e-4, "{act:?}: worst relative error {:e}", r.worst);
    }
}

#[test]
fn teacher_receives_no_adjoint() {
    assert_eq!(mae_teacher_adjoint_max(4), 0.0);
}
