#![no_main]

use lcid::data::{parse_observations, read_dataset};
use lcid::spec::{EventModel, ModelSpec};
use libfuzzer_sys::fuzz_target;

const EVENTS: &[u8] = b"id,t0,l,r,delta_a,t,delta_d,X\n1,70,74,76,1,80,1,1\n2,66,70,,0,75,0,0\n";

fuzz_target!(|data: &[u8]| {
    let _ = parse_observations(data);
    let spec = ModelSpec::linear_trend(2, EventModel::IllnessDeath, true);
    let _ = read_dataset(EVENTS, data, &spec);
});
