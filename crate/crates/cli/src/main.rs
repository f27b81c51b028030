fn main() {
    println!("livespeech");
}
