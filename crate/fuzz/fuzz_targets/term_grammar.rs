#![no_main]

use lcid::spec::Term;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if let Ok(term) = data.parse::<Term>() {
        let again: Term = term.to_string().parse().expect("displayed term parses");
        assert_eq!(term, again);
    }
});
