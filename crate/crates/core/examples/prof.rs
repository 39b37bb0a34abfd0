use std::time::Instant;
use latkit::corpus::{generate, GeneratorConfig};
use latkit::graph::{compile_denominator, estimate_phone_lm, numerator_from_transcript, Phone, PhoneSet};
use latkit::mmi::{graph_forward_backward, mmi_loss_and_grad, output_alignment};
use latkit::model::{init_model, ModelConfig};
use ndarray::Array2;

fn main() {
    let mut cfg = latkit::harness::benchmark_corpus();
    cfg.seed = 11;
    let (train_c, _) = generate(&cfg).unwrap();
    println!("{} train utts", train_c.utterances.len());
    let transcripts: Vec<Vec<Phone>> = train_c.utterances.iter().map(|u| u.transcript.clone()).collect();
    let t0 = Instant::now();
    let lm = estimate_phone_lm(&transcripts, 3, 12).unwrap();
    println!("lm: {:?}", t0.elapsed());
    let ps = PhoneSet::new(12, 1).unwrap();
    let t0 = Instant::now();
    let den = compile_denominator(&lm, &ps);
    println!("den: {:?} states {} arcs {}", t0.elapsed(), den.num_states(), den.arcs().len());
    let model = init_model(ModelConfig::desk_default(20, 12, 1)).unwrap();
    let utt = &train_c.utterances[0];
    let t0 = Instant::now();
    let (_trace, outputs) = model.forward_trace(&utt.features, None).unwrap();
    println!("forward: {:?} t_out {}", t0.elapsed(), outputs.nrows());
    let align = output_alignment(&utt.transcript, &utt.alignment, model.config()).unwrap();
    let (num, mask) = numerator_from_transcript(&utt.transcript, &align, align.len(), 2, &lm, &ps).unwrap();
    let t0 = Instant::now();
    let dp = graph_forward_backward(&den, &outputs, 1.0, None).unwrap();
    println!("den fb: {:?} logz {}", t0.elapsed(), dp.logz);
    let t0 = Instant::now();
    for _ in 0..10 { graph_forward_backward(&den, &outputs, 1.0, None).unwrap(); }
    println!("den fb x10: {:?}", t0.elapsed());
    let t0 = Instant::now();
    let (loss, grad) = mmi_loss_and_grad(&outputs, &num, &mask, &den, 1.0).unwrap();
    println!("mmi: {:?} obj {} grad dim {:?}", t0.elapsed(), loss.objective(), grad.dim());
    let t0 = Instant::now();
    let grads = model.backward(&_trace, &grad, &latkit::model::ParamSelector::all()).unwrap();
    println!("backward: {:?} {}", t0.elapsed(), grads.layers.is_some());
    let zeros = Array2::<f64>::zeros(outputs.dim());
    let t0 = Instant::now();
    graph_forward_backward(&den, &zeros, 1.0, None).unwrap();
    println!("den fb zeros: {:?}", t0.elapsed());
}
