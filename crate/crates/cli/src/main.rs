fn main() {
    println!("igc");
}
