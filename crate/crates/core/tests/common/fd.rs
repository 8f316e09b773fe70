use dacbert::nn::{Bound, Encoder, Graph, ModelConfig, ModelShape, ParamStore, Tensor, Var};
use dacbert::Vocabulary;

pub const EPS: f64 = 1e-3;
pub const TOL: f64 = 1e-3;

/// Deterministic perturbation so norm gains, offsets and scores leave
/// their symmetric initial values.
pub fn perturb(store: &mut ParamStore<f64>) {
    let ids: Vec<_> = store
        .entries()
        .iter()
        .filter(|e| !e.kind.decays())
        .map(|e| store.id(&e.name).unwrap())
        .collect();
    for (pi, id) in ids.into_iter().enumerate() {
        for (k, v) in store.get_mut(id).data_mut().iter_mut().enumerate() {
            *v += 0.3 * ((k as f64) * 1.7 + pi as f64 * 0.9).sin();
        }
    }
}

/// Compares analytic and numeric gradients of `loss` for every scalar of
/// every parameter and returns the worst relative error with its location.
pub fn check<F>(store: &mut ParamStore<f64>, loss: F) -> (f64, String)
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>, &Bound) -> Var,
{
    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let root = loss(&mut g, store, &bound);
    let mut grads = g.backward(root).unwrap();
    let analytic = store.collect_grads(&bound, &mut grads);
    let eval = |s: &ParamStore<f64>| {
        let mut g = Graph::new();
        let b = s.bind(&mut g);
        let r = loss(&mut g, s, &b);
        g.value(r).data()[0]
    };
    let mut worst = (0.0, String::new());
    let names: Vec<String> = store.entries().iter().map(|e| e.name.clone()).collect();
    for (pi, name) in names.iter().enumerate() {
        let id = store.id(name).unwrap();
        let n = store.get(id).len();
        let zeros = Tensor::zeros(store.get(id).shape());
        let a = analytic[pi].as_ref().unwrap_or(&zeros);
        for k in 0..n {
            let orig = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = orig + EPS;
            let up = eval(store);
            store.get_mut(id).data_mut()[k] = orig - EPS;
            let down = eval(store);
            store.get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * EPS);
            let an = a.data()[k];
            let rel = (an - numeric).abs() / an.abs().max(numeric.abs()).max(1e-6);
            if rel > worst.0 {
                worst = (rel, format!("{name}[{k}]: analytic {an:e}, numeric {numeric:e}"));
            }
        }
    }
    worst
}

pub fn vocab() -> Vocabulary {
    Vocabulary::with_words(&["bo", "ka", "mi", "re", "tu", "had", "in", "the", "."]).unwrap()
}

pub fn small(v: &Vocabulary, layers: usize, d: usize, heads: usize, max: usize) -> ModelConfig {
    ModelShape::new(layers, d, heads).to_config(v.len(), max)
}

/// Worst relative error of a 2-layer, width-16, 2-head encoder under an MLM loss.
pub fn encoder_gradcheck(with_mask: bool) -> (f64, String) {
    let v = vocab();
    let cfg = small(&v, 2, 16, 2, 16);
    let mut store = ParamStore::new();
    let enc = Encoder::init(&mut store, "", &cfg, &mut dacbert::rng::stream(1, "init/main")).unwrap();
    perturb(&mut store);
    let ids = vec![2, 5, 4, 7, 8, 3];
    let labels = vec![None, None, Some(6), None, Some(8), None];
    let mask: Vec<bool> = vec![true, true, true, true, !with_mask, true];
    check(&mut store, |g, _, b| {
        let m = with_mask.then_some(mask.as_slice());
        let out = enc.forward(g, b, &ids, m, None, None).unwrap();
        let logits = enc.mlm_logits(g, b, out.hidden);
        g.cross_entropy(logits, labels.clone())
    })
}
