//! Command-line interface (placeholder while the library is under construction).

pub fn run() -> i32 {
    0
}
