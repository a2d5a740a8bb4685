//! Reverse-mode gradients on a tiny expression, checked by central differences.

use ghostnet::autodiff::{Reduction, Tape, Tensor};

fn loss(w: &Tensor, x: &Tensor) -> f64 {
    let mut t = Tape::new();
    let (w, x) = (t.constant(w.clone()), t.constant(x.clone()));
    let z = t.matmul(x, w).unwrap();
    let h = t.relu(z);
    let l = t.cross_entropy(h, &[1], Reduction::Mean).unwrap();
    t.value(l).item().unwrap()
}

fn main() {
    let w = Tensor::new(vec![3, 2], vec![0.3, 0.6, 0.8, 0.1, -0.5, 0.4]).unwrap();
    let x = Tensor::new(vec![1, 3], vec![1.0, 0.5, -0.25]).unwrap();

    let mut tape = Tape::new();
    let wv = tape.leaf(w.clone(), true);
    let xv = tape.constant(x.clone());
    let z = tape.matmul(xv, wv).unwrap();
    let h = tape.relu(z);
    let l = tape.cross_entropy(h, &[1], Reduction::Mean).unwrap();
    tape.backward(l).unwrap();
    let grad = tape.grad(wv).unwrap().clone();

    println!("loss = {:.6}", tape.value(l).item().unwrap());
    let eps = 1e-6;
    for i in 0..w.len() {
        let (mut p, mut m) = (w.clone(), w.clone());
        p.data_mut()[i] += eps;
        m.data_mut()[i] -= eps;
        let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * eps);
        println!("dL/dw[{i}]  tape {:+.8}  fd {:+.8}", grad.data()[i], fd);
    }
}
