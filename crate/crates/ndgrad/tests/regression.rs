use ndgrad::{Graph, Tensor};

// Gradient descent on a least-squares problem recovers the generating weights.
#[test]
fn linear_regression_recovers_weights() {
    let x = Tensor::<f64>::rand_uniform(&[64, 3], -1.0, 1.0, 1);
    let truth = Tensor::<f64>::from_f64(&[3, 2], &[0.5, -1.0, 2.0, 0.25, -0.75, 1.5]).unwrap();
    let y = {
        let mut g = Graph::new();
        let (xv, tv) = (g.constant(x.clone()), g.constant(truth.clone()));
        let yv = g.linear(xv, tv).unwrap();
        g.value(yv).clone()
    };
    let mut w = Tensor::<f64>::zeros(&[3, 2]);
    for _ in 0..2000 {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.param(w.clone());
        let yv = g.constant(y.clone());
        let pred = g.linear(xv, wv).unwrap();
        let d = g.sub(pred, yv).unwrap();
        let sq = g.square(d);
        let loss = g.mean(sq);
        let grads = g.backward(loss).unwrap();
        let gw = grads.get(&wv).unwrap();
        w = w.zip_map(gw, "sgd", |p, q| p - 0.5 * q).unwrap();
    }
    assert!(w.max_abs_diff(&truth).unwrap() < 1e-9);
}
