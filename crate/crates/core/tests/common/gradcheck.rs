use geosam::loss::{dice_focal, dice_focal_with_grad, LossConfig};
use geosam::model::{stack, unstack, ClassInput, GeoSam, ModelConfig};
use geosam::params::Binder;
use geosam::points::PointPromptSet;
use geosam::raster::{ClassCatalog, RasterImage};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn setup() -> (GeoSam, geosam::model::ImageEmbedding, Vec<ClassInput>, Array3<f64>) {
    let cat = ClassCatalog::default();
    let model = GeoSam::new(ModelConfig::default(), cat, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data: Vec<f32> = (0..128 * 128 * 3).map(|_| rng.random::<f32>()).collect();
    let emb = model.encode_image(&RasterImage::new(128, 128, data).unwrap()).unwrap();
    let mk = |c: usize, rng: &mut ChaCha8Rng| PointPromptSet {
        foreground: (0..6).map(|_| [rng.random_range(0..128), rng.random_range(0..128)]).collect(),
        background: (0..3).map(|_| [rng.random_range(0..128), rng.random_range(0..128)]).collect(),
        ..PointPromptSet::empty("x", c)
    };
    let sets = vec![mk(0, &mut rng), mk(1, &mut rng)];
    let texts: Vec<Array2<f64>> = (0..2)
        .map(|_| Array2::from_shape_fn((2, 512), |_| rng.random_range(-1.0..1.0)))
        .collect();
    let inputs = model.class_inputs(&sets, Some(&texts)).unwrap();
    let target = Array3::from_shape_fn((2, 128, 128), |(c, y, x)| f64::from(u8::from((x / 16 + y / 16 + c) % 3 == 0)));
    (model, emb, inputs, target)
}

fn loss_of(model: &GeoSam, emb: &geosam::model::ImageEmbedding, inputs: &[ClassInput], target: &Array3<f64>) -> f64 {
    let mut b = Binder::new(&model.store).unwrap();
    let logits = model.forward_on(&mut b, emb, inputs).unwrap();
    let probs = b.tape.value(logits).mapv(geosam::tape::sigmoid);
    dice_focal(unstack(&probs, 2).view(), target.view(), &LossConfig::default()).unwrap()
}

/// Compares analytic decoder gradients with central differences on
/// `samples` random trainable scalars; returns (agreeing, total).
pub fn decoder_gradcheck(samples: usize) -> (usize, usize) {
    let (mut model, emb, inputs, target) = setup();
    let grads = {
        let mut b = Binder::new(&model.store).unwrap();
        let logits = model.forward_on(&mut b, &emb, &inputs).unwrap();
        let probs = b.tape.sigmoid(logits);
        let s = unstack(b.tape.value(probs), 2);
        let (v, g) = dice_focal_with_grad(s.view(), target.view(), &LossConfig::default()).unwrap();
        let root = b.tape.scalar(probs, v, stack(&g));
        b.gradients(root)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let names: Vec<String> = model.trainable_parameters().unwrap().iter().map(|s| s.to_string()).collect();
    let (mut ok, mut total) = (0, 0);
    for _ in 0..samples {
        let name = &names[rng.random_range(0..names.len())];
        let g = &grads.iter().find(|(n, _)| n == name).expect("grad present").1;
        let (r, c) = (rng.random_range(0..g.nrows()), rng.random_range(0..g.ncols()));
        let h = 1e-5;
        let orig = model.store.get(name).unwrap()[[r, c]];
        model.store.get_mut(name).unwrap()[[r, c]] = orig + h;
        let lp = loss_of(&model, &emb, &inputs, &target);
        model.store.get_mut(name).unwrap()[[r, c]] = orig - h;
        let lm = loss_of(&model, &emb, &inputs, &target);
        model.store.get_mut(name).unwrap()[[r, c]] = orig;
        let num = (lp - lm) / (2.0 * h);
        let a = g[[r, c]];
        let rel = (a - num).abs() / (a.abs().max(num.abs()).max(1e-8));
        total += 1;
        if rel <= 1e-4 || (a - num).abs() < 1e-10 {
            ok += 1;
        } else {
            eprintln!("{name}[{r},{c}] analytic {a:e} numeric {num:e} rel {rel:e}");
        }
    }
    (ok, total)
}
