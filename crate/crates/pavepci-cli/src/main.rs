fn main() {
    println!("pavepci");
}
