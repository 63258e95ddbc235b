#![no_main]

use libfuzzer_sys::fuzz_target;
use nearopt::config::{read_control_csv, write_control_csv};
use nearopt::model::ControlSet;
use nearopt::paths::make_time_grid;

// First byte picks the grid size, the rest is the file.
fuzz_target!(|data: &[u8]| {
    let Some((&n, body)) = data.split_first() else {
        return;
    };
    let grid = make_time_grid(1.0, 1 + usize::from(n % 8)).unwrap();
    let set = ControlSet::interval(-2.0, 2.0).unwrap();
    let Ok(u) = read_control_csv(body, grid, &set) else {
        return;
    };
    assert!(u.is_admissible(&set));
    let mut buf = Vec::new();
    write_control_csv(&u, &mut buf).unwrap();
    assert_eq!(read_control_csv(buf.as_slice(), grid, &set).unwrap(), u);
});
