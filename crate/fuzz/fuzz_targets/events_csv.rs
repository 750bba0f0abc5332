#![no_main]

use lcid::data::{parse_events, read_dataset};
use lcid::spec::{EventModel, ModelSpec};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = parse_events(data);
    let spec = ModelSpec::linear_trend(2, EventModel::IllnessDeath, true);
    let _ = read_dataset(data, &b"id,marker,time,value,X\n"[..], &spec);
});
