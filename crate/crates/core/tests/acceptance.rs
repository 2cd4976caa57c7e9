fn main() { println!("acceptance: not yet implemented"); }
