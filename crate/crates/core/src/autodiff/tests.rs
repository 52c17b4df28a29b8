use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Builds `sum(w * f(inputs))` with a fixed random weight tensor so every
/// output entry matters, and checks each input gradient against central
/// differences with step 1e-6.
fn gradcheck(inputs: &[Tensor], tol: f64, f: impl Fn(&mut Graph, &[Var]) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let eval = |ts: &[Tensor], want_grad: bool, weight: Option<&Tensor>| -> (f64, Option<Vec<Vec<f64>>>, Tensor) {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.param(t.clone())).collect();
        let y = f(&mut g, &vars);
        let w = weight.cloned().unwrap_or_else(|| {
            let mut r = ChaCha8Rng::seed_from_u64(7);
            rand_tensor(&mut r, g.shape(y))
        });
        let wv = g.constant(w.clone());
        let p = g.mul(y, wv).unwrap();
        let loss = g.sum(p);
        let val = g.value(loss).item();
        let grads = want_grad.then(|| {
            let gr = g.backward(loss).unwrap();
            vars.iter()
                .map(|v| gr.get_slice(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(*v).len()]))
                .collect()
        });
        (val, grads, w)
    };
    let (_, grads, w) = eval(inputs, true, None);
    let grads = grads.unwrap();
    let h = 1e-6;
    for (ti, t) in inputs.iter().enumerate() {
        // Probe a random subset of entries for large tensors.
        let idxs: Vec<usize> = if t.len() <= 64 {
            (0..t.len()).collect()
        } else {
            (0..64).map(|_| rng.random_range(0..t.len())).collect()
        };
        for i in idxs {
            let mut plus = inputs.to_vec();
            plus[ti].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[ti].data_mut()[i] -= h;
            let fd = (eval(&plus, false, Some(&w)).0 - eval(&minus, false, Some(&w)).0) / (2.0 * h);
            let an = grads[ti][i];
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1.0);
            assert!(err < tol, "input {ti} entry {i}: analytic {an} vs fd {fd}");
        }
    }
}

#[test]
fn sigmoid_of_zero_is_half() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::scalar(0.0));
    let y = g.sigmoid(x);
    assert_eq!(g.value(y).item(), 0.5);
}

#[test]
fn sum_of_squares_gradient_is_twice_input() {
    let mut g = Graph::new();
    let x = g.param(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
    let s = g.square(x);
    let l = g.sum(s);
    let gr = g.backward(l).unwrap();
    assert_eq!(gr.get_slice(x).unwrap(), &[2.0, -4.0, 1.0]);
}

#[test]
fn fan_out_accumulates() {
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(3.0));
    let y = g.add(x, x).unwrap();
    let gr = g.backward(y).unwrap();
    assert_eq!(gr.get_slice(x).unwrap(), &[2.0]);
}

#[test]
fn multiplying_by_zero_gives_zero_gradient() {
    let mut g = Graph::new();
    let x = g.param(Tensor::new(vec![2], vec![1.5, -4.0]).unwrap());
    let z = g.constant(Tensor::zeros(&[2]));
    let y = g.mul(x, z).unwrap();
    let l = g.sum(y);
    let gr = g.backward(l).unwrap();
    assert_eq!(gr.get_slice(x).unwrap(), &[0.0, 0.0]);
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::scalar(2.0));
    let p = g.param(Tensor::scalar(1.0));
    let y = g.mul(x, p).unwrap();
    let gr = g.backward(y).unwrap();
    assert!(gr.get(x).is_none());
    assert_eq!(gr.get(p).unwrap().item(), 2.0);
}

#[test]
fn elementwise_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[3, 3, 2]);
    let b = rand_tensor(&mut rng, &[3, 3, 2]);
    let s = Tensor::scalar(0.7);
    gradcheck(&[a.clone(), b.clone()], 1e-5, |g, v| g.add(v[0], v[1]).unwrap());
    gradcheck(&[a.clone(), b.clone()], 1e-5, |g, v| g.sub(v[0], v[1]).unwrap());
    gradcheck(&[a.clone(), b.clone()], 1e-5, |g, v| g.mul(v[0], v[1]).unwrap());
    gradcheck(&[a.clone(), s.clone()], 1e-5, |g, v| g.mul(v[0], v[1]).unwrap());
    gradcheck(&[s.clone(), a.clone()], 1e-5, |g, v| g.sub(v[0], v[1]).unwrap());
    gradcheck(&[a.clone()], 1e-5, |g, v| g.scale(v[0], -2.5));
    gradcheck(&[a.clone()], 1e-5, |g, v| g.add_const(v[0], 4.0));
    gradcheck(&[a.clone()], 1e-5, |g, v| g.sigmoid(v[0]));
    gradcheck(&[a.clone()], 1e-5, |g, v| g.tanh(v[0]));
    gradcheck(&[a.clone()], 1e-5, |g, v| g.square(v[0]));
    gradcheck(&[a.clone()], 1e-5, |g, v| g.mean(v[0]));
    gradcheck(&[a.clone()], 1e-5, |g, v| g.mean_square(v[0]));
}

#[test]
fn periodic_activation_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[4, 4, 3]);
    for alpha in [0.5, -1.3, 5.0] {
        gradcheck(&[x.clone(), Tensor::scalar(alpha)], 1e-5, |g, v| g.periodic_xi(v[0], v[1]).unwrap());
    }
}

#[test]
fn tiny_alpha_is_clamped_and_counted() {
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(0.3));
    let a = g.param(Tensor::scalar(1e-5));
    let y = g.periodic_xi(x, a).unwrap();
    assert_eq!(g.clamp_events(), 1);
    let want = periodic_xi_value(0.3, ALPHA_FLOOR);
    assert_eq!(g.value(y).item(), want);
    let gr = g.backward(y).unwrap();
    assert!(gr.get(a).is_none_or(|t| t.item() == 0.0));
}

#[test]
fn conv_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[6, 6, 3]);
    let k3 = rand_tensor(&mut rng, &[3, 3, 3, 4]);
    let k4 = rand_tensor(&mut rng, &[4, 4, 3, 2]);
    let b4 = rand_tensor(&mut rng, &[4]);
    let b2 = rand_tensor(&mut rng, &[2]);
    gradcheck(&[x.clone(), k3, b4], 1e-5, |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1).unwrap());
    gradcheck(&[x, k4, b2], 1e-5, |g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1).unwrap());
}

#[test]
fn structural_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[3, 3, 8]);
    let y = rand_tensor(&mut rng, &[3, 3, 2]);
    gradcheck(&[x.clone()], 1e-5, |g, v| g.pixel_shuffle(v[0], 2).unwrap());
    gradcheck(&[x.clone()], 1e-5, |g, v| g.slice_channels(v[0], 2, 5).unwrap());
    gradcheck(&[x.clone()], 1e-5, |g, v| g.reshape(v[0], &[9, 8]).unwrap());
    gradcheck(&[x, y], 1e-5, |g, v| g.concat_channels(&[v[1], v[0], v[1]]).unwrap());
    let f = rand_tensor(&mut rng, &[5, 5, 2]);
    let kern = Arc::new(rand_tensor(&mut rng, &[25]).into_data());
    gradcheck(&[f], 1e-5, |g, v| g.filter(v[0], kern.clone(), 2).unwrap());
}

#[test]
fn strided_conv_halves_resolution() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[128, 128, 2]));
    let k = g.constant(Tensor::zeros(&[4, 4, 2, 8]));
    let y = g.conv2d(x, k, None, 2, 1).unwrap();
    assert_eq!(g.shape(y), &[64, 64, 8]);
}

#[test]
fn identity_one_by_one_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let xt = rand_tensor(&mut rng, &[4, 4, 3]);
    let mut kd = vec![0.0; 9];
    for c in 0..3 {
        kd[c * 3 + c] = 1.0;
    }
    let mut g = Graph::new();
    let x = g.constant(xt.clone());
    let k = g.constant(Tensor::new(vec![1, 1, 3, 3], kd).unwrap());
    let y = g.conv2d(x, k, None, 1, 0).unwrap();
    assert_eq!(g.value(y), &xt);
}

#[test]
fn all_ones_kernel_on_ones_counts_taps() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[5, 5, 2], 1.0));
    let k = g.constant(Tensor::full(&[3, 3, 2, 1], 1.0));
    let y = g.conv2d(x, k, None, 1, 1).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 18.0));
}

#[test]
fn conv_wraps_periodically() {
    // A single hot pixel in the corner shows up on the opposite edge.
    let mut xd = vec![0.0; 16];
    xd[0] = 1.0;
    let mut kd = vec![0.0; 9];
    kd[0] = 1.0; // tap at (-1, -1)
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![4, 4, 1], xd).unwrap());
    let k = g.constant(Tensor::new(vec![3, 3, 1, 1], kd).unwrap());
    let y = g.conv2d(x, k, None, 1, 1).unwrap();
    let out = g.value(y).data();
    assert_eq!(out[5], 1.0);
    assert_eq!(out.iter().sum::<f64>(), 1.0);
}

#[test]
fn conv_rejects_channel_mismatch() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[4, 4, 2]));
    let k = g.constant(Tensor::zeros(&[3, 3, 3, 1]));
    assert!(matches!(g.conv2d(x, k, None, 1, 1), Err(Error::Shape(_))));
}

#[test]
fn pixel_shuffle_shapes_and_placement() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[16, 16, 64]));
    let y = g.pixel_shuffle(x, 2).unwrap();
    assert_eq!(g.shape(y), &[32, 32, 16]);

    // Channels (0,1,2,3) of one pixel fill its 2x2 output block row-major.
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = g.pixel_shuffle(x, 2).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn pixel_shuffle_r1_is_identity_and_shuffle_is_a_permutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let xt = rand_tensor(&mut rng, &[3, 3, 4]);
    let mut g = Graph::new();
    let x = g.constant(xt.clone());
    let y = g.pixel_shuffle(x, 1).unwrap();
    assert_eq!(g.value(y), &xt);

    let map = kernels::shuffle_index(5, 3, 12, 2);
    let mut seen = map.clone();
    seen.sort_unstable();
    assert_eq!(seen, (0..map.len()).collect::<Vec<_>>());
}

#[test]
fn pixel_shuffle_rejects_bad_channel_count() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2, 2, 6]));
    assert!(g.pixel_shuffle(x, 2).is_err());
}

#[test]
fn backward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut g = Graph::new();
        let x = g.param(rand_tensor(&mut rng, &[6, 6, 2]));
        let k = g.param(rand_tensor(&mut rng, &[3, 3, 2, 4]));
        let y = g.conv2d(x, k, None, 1, 1).unwrap();
        let t = g.tanh(y);
        let l = g.mean_square(t);
        let gr = g.backward(l).unwrap();
        (gr.get(x).unwrap(), gr.get(k).unwrap())
    };
    assert_eq!(run(), run());
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::new();
    let x = g.param(Tensor::zeros(&[2]));
    assert!(g.backward(x).is_err());
}
