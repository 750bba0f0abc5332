#![no_main]

use lcid_cli::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if let Ok(cfg) = RunConfig::from_toml(data) {
        let _ = cfg.model_spec();
        let _ = cfg.simulation.design();
        let _ = cfg.to_toml();
    }
});
