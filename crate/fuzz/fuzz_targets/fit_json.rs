#![no_main]

use lcid::likelihood::class_membership_probs;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if let Ok(fit) = lcid_cli::parse_fit(data) {
        let _ = fit.theta_hat.to_vector();
        let _ = class_membership_probs(&fit.theta_hat.zeta, &vec![0.0; fit.spec.class_covariates.len()]);
    }
});
