from pydantic import BaseModel, Field


class Manifest(BaseModel):
    command: str
    config_hash: str
    seed: int
    reads_clean: bool = Field(False, description="Whether the command opened clean images")
    inputs: list[str] = Field(default_factory=list)
    artifacts: dict[str, str] = Field(default_factory=dict, description="Relative path to SHA-256")
    notes: dict[str, str] = Field(default_factory=dict)
