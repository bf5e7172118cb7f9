# GenRL: grounded world models for prompt-driven behavior learning
