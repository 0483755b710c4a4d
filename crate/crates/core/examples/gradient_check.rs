//! Checks reverse-mode gradients of a small attention-like expression
//! against central differences in 64-bit.

use endx::autodiff::Graph;
use endx::tensor::Tensor;

fn f(x: &Tensor<f64>, w: &Tensor<f64>) -> (f64, Vec<f64>) {
    let mut g = Graph::new();
    let xv = g.input(x.clone(), true);
    let wv = g.input(w.clone(), false);
    let s = g.matmul_t(xv, wv, false, true);
    let p = g.softmax(s, None);
    let h = g.tanh(p);
    let loss = g.sum(h);
    let grads = g.backward(loss).unwrap();
    (g.value(loss).data()[0], grads.get(xv).unwrap().data().to_vec())
}

fn main() {
    let x = Tensor::new(&[3, 4], (0..12).map(|i| ((i * 7 % 5) as f64 - 2.0) / 3.0).collect()).unwrap();
    let w = Tensor::new(&[5, 4], (0..20).map(|i| ((i * 3 % 7) as f64 - 3.0) / 4.0).collect()).unwrap();
    let (_, analytic) = f(&x, &w);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut up = x.clone();
        up.data_mut()[i] += h;
        let mut down = x.clone();
        down.data_mut()[i] -= h;
        let numeric = (f(&up, &w).0 - f(&down, &w).0) / (2.0 * h);
        worst = worst.max((numeric - analytic[i]).abs());
        println!("d/dx[{i:>2}]  analytic {:>12.8}  numeric {numeric:>12.8}", analytic[i]);
    }
    println!("max abs difference {worst:.2e}");
}
