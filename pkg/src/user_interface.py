import logging
from typing import Callable, List, Optional

from fuzzywuzzy import process

from exceptions import ConfigError
from presets import preset_catalog, preset_names

logger = logging.getLogger(__name__)

MATCH_THRESHOLD = 90


def suggest_presets(query: str, limit: int = 3) -> List[tuple]:
    """Best (name, score) matches of ``query`` among the preset ids."""
    return process.extract(query, preset_names(), limit=limit)


def resolve_preset_name(query: str) -> str:
    """
    Map a user-typed preset name to a preset id.

    Exact ids pass through; otherwise the best fuzzy match is accepted when it
    scores at least MATCH_THRESHOLD.

    Raises:
        ConfigError: No preset matches closely enough
    """
    names = preset_names()
    if query in names:
        return query
    matches = suggest_presets(query)
    if matches and matches[0][1] >= MATCH_THRESHOLD:
        logger.warning("Preset %r not found, using %r (match score %d)", query, matches[0][0], matches[0][1])
        return matches[0][0]
    hints = ", ".join(f"{name} ({score})" for name, score in matches)
    raise ConfigError(f"unknown preset {query!r}; closest matches: {hints}")


def choose_preset_interactive(input_fn: Callable[[str], str] = input) -> Optional[str]:
    """
    Interactive preset selection with fuzzy search.

    Args:
        input_fn (Callable): Prompt reader, ``input`` by default

    Returns:
        Optional[str]: Selected preset id or None if cancelled
    """
    catalog = preset_catalog()
    print("\nAvailable presets:")
    for i, preset in enumerate(catalog, 1):
        print(f"{i}. {preset.name:<36} {preset.title}")

    while True:
        search = input_fn("\nEnter preset name (or part of it) to search, or 'quit' to quit: ").strip()

        if search.lower() == "quit":
            return None
        if search.isdigit() and 1 <= int(search) <= len(catalog):
            return catalog[int(search) - 1].name

        matches = suggest_presets(search, limit=5)
        if not matches:
            print("No matching presets found. Please try again.")
            continue

        print("\nBest matches:")
        for i, (name, score) in enumerate(matches, 1):
            print(f"{i}. {name} (match score: {score})")

        choice = input_fn("\nEnter number to select preset, or any other key to search again: ").strip()
        if choice.isdigit() and 1 <= int(choice) <= len(matches):
            return matches[int(choice) - 1][0]
