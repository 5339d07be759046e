#![no_main]

use hiproto_cli::config::{EvalRun, FogRun, SynthRun, TrainRun, VisualizeRun};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = serde_json::from_slice::<SynthRun>(data).map(|r| r.dataset_spec().scene.validate(None));
    let _ = serde_json::from_slice::<FogRun>(data);
    if let Ok(r) = serde_json::from_slice::<TrainRun>(data) {
        let _ = r.train_config().validate();
        let _ = r.model_config(256, 3).validate();
    }
    let _ = serde_json::from_slice::<EvalRun>(data);
    let _ = serde_json::from_slice::<VisualizeRun>(data);
});
