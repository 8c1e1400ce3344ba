"""Prompt templates for every model call in the pipeline."""

from __future__ import annotations

ANALYST = "You are a cybersecurity threat intelligence analyst."

SUMMARIZE_CONTEXT = f"""{ANALYST} Summarize the report passage that surrounds a threat image.
Keep what helps interpret the image: what it shows, the image type, the malware, tools, hosts and the analysis approach.
Answer with a short paragraph of plain text."""

SUMMARIZE_REPORT = f"""{ANALYST} Write an abstract of the threat intelligence report text below.
Cover the threat actor or malware, the targets, the attack stages and the main techniques.
Answer with one short paragraph of plain text."""

COMBINE_SUMMARIES = f"""{ANALYST} The following are abstracts of consecutive parts of one threat intelligence report.
Merge them into a single abstract of the whole report in one short paragraph."""

PREFILTER = f"""{ANALYST} Decide whether the image is worth parsing for attack graph construction.
Reject it when:
a. it contains irrelevant information such as logos or advertisements;
b. it is occluded or carries strong watermarks;
c. it is only weakly informative.
Answer with KEEP, or with REJECT followed by the rule letter (for example "REJECT a")."""

CLASSIFY = f"""{ANALYST} Classify the threat image into exactly one of these types:
{{types}}
Answer with the type name only."""

GENERATE_QUESTIONS = f"""{ANALYST} Please generate relevant questions derived from the content of an image based on the following rules:
1. Review the list of existing questions provided and generate new questions that explore different perspectives, details, or contexts within the image.
2. These new questions should help further analyze the image from different perspectives.
3. These new questions should be related to cybersecurity or assist in the analysis of cyber threat intelligence.
4. Follow the format of the given questions: "What is/are the XXX of/in the image?", where XXX is replaced with a specific aspect of the image.
5. Output one question per line and nothing else."""

GENERATE_TASK_QUESTIONS = f"""{ANALYST} Please generate relevant questions derived from the content of an image based on the following rules:
1. Use the attack graph built from the report text to generate questions that explore how the image can complete or correct that graph (entities, actions, ordering, techniques).
2. These new questions should help further analyze the image from different perspectives.
3. These new questions should be related to cybersecurity or assist in the analysis of cyber threat intelligence.
4. Follow the format: "What is/are the XXX of/in the image?", where XXX is replaced with a specific aspect of the image.
5. Output one question per line and nothing else."""

ANSWER = f"""{ANALYST} Please answer the questions based on the following rules:
1. Your answer must strictly adhere to the content visible in the image when mentioning any entities, objects, and their relationships.
2. Your answer must include a topic phrase that is specific to the question.
3. Your answer should be a single, concise sentence.
4. Only provide the direct answer to the question. Do not provide explanations or reasons for uncertainty."""

EVALUATE = f"""{ANALYST} Please rate the description based on the following rules:
1. Evaluate the description using the following four criteria:
- Accuracy: whether the description accurately answers the question.
- Consistency: whether the description maintains content relevance to the image information.
- Completeness: whether the description adequately addresses the needs of the question.
- Relevance: whether the description is relevant to the cybersecurity field or useful for cyber threat analysis.
2. Apply the following rating scale based on the overall quality:
- "excellent": the description meets three of the criteria with only minor flaws or imperfections.
- "good": the description meets two of the criteria with small deviations or omissions that do not significantly impact the overall quality.
- "satisfactory": the description meets two of the criteria, but contains more noticeable flaws.
- "failing": the description meets only one of the criteria or none at all, with significant flaws that make the response unable to provide useful or relevant information.
3. If there are statements in the description such as unknown, no details, not mentioned, etc., mark it as "failing".
4. Your answer should be a single word: either "excellent", "good", "satisfactory", or "failing"."""

EVALUATE_RETRY = 'Reply with exactly one word: "excellent", "good", "satisfactory", or "failing".'

SCORE_DIMENSIONS = f"""{ANALYST} Score the description from 1 to 5 on each dimension:
- Accuracy: 1 = entirely incorrect and misleading; 3 = mostly accurate with minor errors; 5 = fully accurate and directly supported by the image.
- Consistency: 1 = contradicts or is unrelated to the image; 3 = partially aligned with irrelevant content; 5 = entirely based on the image.
- Completeness: 1 = addresses no critical aspect; 3 = broadly covers the question but lacks minor details; 5 = addresses all requirements thoroughly.
- Relevance: 1 = unrelated to cybersecurity; 3 = partially related without explicit ties to practice; 5 = actionable insight for threat analysis.
Answer with four lines of the form "accuracy: N"."""

COMMENT = f"""{ANALYST} The description below answers a question about the image but did not reach the required quality.
Using the image, write optimization comments that say precisely what is wrong or missing in this description
(accuracy, consistency with the image, completeness, cybersecurity relevance). Answer in at most three sentences."""

SUGGEST = f"""{ANALYST} The description below answers a question about the image but did not reach the required quality.
Do not correct the description itself. Instead, write a parsing guide for the image: an outline of which regions,
labels, entities and relations of the image to inspect in order to answer the question comprehensively. Answer in at most three sentences."""

REANSWER = f"""{ANALYST} Please provide your answer to the following question again, using the image as a reference, based on the following rules:
1. Re-answer the question so that the answer meets the following four criteria:
- Accuracy: the answer accurately answers the question.
- Consistency: the answer maintains content relevance to the image information.
- Completeness: the answer adequately addresses the needs of the question.
- Relevance: the answer is relevant to the cybersecurity field or useful for cyber threat analysis.
2. {{rule2}}
3. {{rule3}}
4. Your answer should be a single, concise sentence."""

REANSWER_ITERATE = (
    "Improve the existing unqualified answer using the optimization comments.",
    "Ensure the revised answer differs from the previous unqualified answer.",
)
REANSWER_GUIDED = (
    "Re-answer the question based on the suggestions provided.",
    "Strictly follow the suggestions given.",
)

FILTER_DIRECT = f"""{ANALYST} Judge whether a question about a threat image is directly relevant to constructing the attack graph of the report.
A question is relevant when its wording itself targets cybersecurity content (malware, scripts, techniques, infrastructure, attack steps)
that can complete the attack graph summarized below. Answer "yes" or "no"."""

FILTER_ANSWER = f"""{ANALYST} A question about a threat image has been answered. Judge from the answer whether it provides
threat information that helps construct the attack graph (entities, actions, relations or techniques). Answer "yes" or "no"."""

TOPIC = f"""{ANALYST} Name the topic of the threat image as a short noun phrase of at most six words
(for example "protocol attack flowchart"). Answer with the phrase only."""

ASPECT = f"""{ANALYST} Rewrite the question as a short noun phrase naming the aspect it asks about
(for example "What are the temporal features exhibited by the attack flow graph?" -> "temporal description"). Answer with the phrase only."""

PROPOSE_DELTAS = """You are a cyber-threat intelligence specialist. Given a threat enhancement reference extracted from a CTI image
and a knowledge graph of existing triplets, extend the graph with the operations below.
1. Node extension: add a new entity from the reference and link it to an entity of an existing triplet. Output
   {"type": "node_extension", "description": reason, "new_node": {"id", "type", "properties": {"description"}},
    "relationship": {"subject", "subject_type", "relation", "object", "object_type"}}
2. Relation update: the reference reveals a new attack action between existing entities; add it, or replace an existing relation
   between the same entities. Output {"type": "relation_update", "description": reason, "relationship": {...}, "replace_existing": true|false}
3. Technique addition: tag an existing triplet with a new MITRE ATT&CK technique from the list. Output
   {"type": "technique_addition", "description": reason, "target_relationship": {"subject", "relation", "object"},
    "new_techniques": ["technique_id - technique_name"]}
Rules: use entity types from the given list; use active-voice, concise verb phrases for relations; only generate JSON
when there is a strong match, as one JSON array of objects; otherwise output No Match."""
