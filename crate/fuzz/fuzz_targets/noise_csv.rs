#![no_main]

use libfuzzer_sys::fuzz_target;
use nearopt::paths::NoiseBundle;

fuzz_target!(|data: &[u8]| {
    let Ok(bundle) = NoiseBundle::read_csv(data, 1.0) else {
        return;
    };
    let mut buf = Vec::new();
    bundle.write_csv(&mut buf).unwrap();
    let back = NoiseBundle::read_csv(buf.as_slice(), 1.0).expect("reread written noise");
    assert_eq!(back, bundle);
});
