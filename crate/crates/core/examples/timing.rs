use evpino_core::dataset::make_windows;
use evpino_core::operator::{OperatorConfig, OperatorModel};
use evpino_core::physics::VehicleSpec;
use evpino_core::signal::SgConfig;
use evpino_core::synth::{gen_log, SynthConfig};
use evpino_core::training::{model_loss, LossWeights};
use std::time::Instant;

fn main() {
    println!("rayon threads: {}", rayon::current_num_threads());
    let cfg = OperatorConfig::default();
    let model = OperatorModel::new(cfg, 1).unwrap();
    let synth = SynthConfig { duration: 600.0, ..SynthConfig::default() };
    let log = gen_log(&synth).unwrap();
    let sg = SgConfig::default_for(log.fs).unwrap();
    let windows = make_windows(&log, &sg, 128, 32, None).unwrap();
    let sub: Vec<usize> = (0..32).collect();
    let batch = windows.select(&sub);
    let spec = VehicleSpec::default();

    let mut f_times = Vec::new();
    let mut b_times = Vec::new();
    for _ in 0..10 {
        let t = Instant::now();
        let out = model.forward(&batch, &spec).unwrap();
        f_times.push(t.elapsed().as_secs_f64());
        let t = Instant::now();
        for p in model.params() { p.tensor().zero_grad(); }
        let (loss, _) = model_loss(&model, &out, &batch.p_tensor(), &LossWeights::default()).unwrap();
        loss.backward().unwrap();
        b_times.push(t.elapsed().as_secs_f64());
    }
    f_times.sort_by(|a,b| a.partial_cmp(b).unwrap());
    b_times.sort_by(|a,b| a.partial_cmp(b).unwrap());
    println!("forward  med {:.1} ms  min {:.1} ms", f_times[5]*1e3, f_times[0]*1e3);
    println!("backward med {:.1} ms  min {:.1} ms", b_times[5]*1e3, b_times[0]*1e3);
}
