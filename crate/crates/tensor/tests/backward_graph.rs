use cevae_tensor::{no_grad, Tensor};

#[test]
fn targeted_backward_matches_full_backward() {
    let a = Tensor::<f64>::var(vec![0.5, -1.0, 2.0], &[3]);
    let b = Tensor::<f64>::var(vec![1.5, 0.25, -0.75], &[3]);
    let loss = ((&a * &b).tanh() + a.sqr()).sum_all() * b.exp().sum_all();
    let full = loss.backward();
    let pruned = loss.backward_targets(&[&b]);
    assert_eq!(full.get(&b).unwrap(), pruned.get(&b).unwrap());
    assert!(pruned.get(&a).is_none());
}

#[test]
fn shared_subexpressions_accumulate() {
    let x = Tensor::<f64>::var(vec![3.0], &[1]);
    let y = &x * &x;
    let loss = (&y + &y).sum_all();
    assert_eq!(loss.backward().get(&x).unwrap(), &[12.0]);
}

#[test]
fn no_grad_records_nothing() {
    let x = Tensor::<f64>::var(vec![1.0, 2.0], &[2]);
    let y = {
        let _g = no_grad();
        x.sqr().sum_all()
    };
    assert!(!y.requires_grad());
    assert!(y.backward().is_empty());
}
