"""Knowledge graph completion with user-preference-enhanced adversarial learning."""
