from typing import Any, Dict

from .exceptions import ConfigError


class Validator:
    @staticmethod
    def validate_min(value: Any, minimum: float) -> bool:
        return value is not None and value >= minimum

    @staticmethod
    def validate_max(value: Any, maximum: float) -> bool:
        return value is not None and value <= maximum

    @staticmethod
    def validate_choice(value: Any, choices) -> bool:
        return value in choices

    @staticmethod
    def validate_ordered(value: Any) -> bool:
        lo, hi = value
        return lo <= hi


def validate(obj: Any, **validators) -> None:
    """Check dataclass fields against rules and raise one ConfigError for all failures.

    Rules per field are a single rule or a list of them; each rule is either
    'positive', 'non_negative', 'ordered', or a dict with any of
    ``min``/``max``/``choices``.
    """
    errors: Dict[str, str] = {}

    for field, rules in validators.items():
        value = getattr(obj, field)

        for rule in rules if isinstance(rules, list) else [rules]:
            if field in errors:
                break
            if rule == 'positive' and not Validator.validate_min(value, 1):
                errors[field] = f"{field} must be >= 1, got {value!r}"
            elif rule == 'non_negative' and not Validator.validate_min(value, 0):
                errors[field] = f"{field} must be >= 0, got {value!r}"
            elif rule == 'ordered' and not Validator.validate_ordered(value):
                errors[field] = f"{field} must be an ordered (lo, hi) pair, got {value!r}"
            elif isinstance(rule, dict):
                if 'min' in rule and not Validator.validate_min(value, rule['min']):
                    errors[field] = f"{field} must be >= {rule['min']}, got {value!r}"
                elif 'max' in rule and not Validator.validate_max(value, rule['max']):
                    errors[field] = f"{field} must be <= {rule['max']}, got {value!r}"
                elif 'choices' in rule and not Validator.validate_choice(value, rule['choices']):
                    errors[field] = f"{field} must be one of {sorted(rule['choices'])}, got {value!r}"

    if errors:
        raise ConfigError(errors)
