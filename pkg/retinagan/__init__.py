"""RetinaGAN: sim-to-real translation with a detection-consistency loss."""
